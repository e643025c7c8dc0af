#pragma once

#include <cstddef>
#include <vector>

#include "dern/error.hpp"

namespace dern {

using Vec = std::vector<float>;

// dense row-major f32 matrix
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0f) {}

    float & at(int r, int c) { return data[size_t(r) * cols + c]; }
    float at(int r, int c) const { return data[size_t(r) * cols + c]; }
    float * row_ptr(int r) { return data.data() + size_t(r) * cols; }
    const float * row_ptr(int r) const { return data.data() + size_t(r) * cols; }

    Vec row(int r) const;
    Vec col(int c) const;

    bool operator==(const Mat & o) const = default;
};

// All reductions accumulate in double, left to right, and round once at the
// end. Determinism across runs and thread counts is a contract, not a wish.

float dot(const Vec & a, const Vec & b);
float l2_norm(const Vec & a);
float linf_norm(const Vec & a);

// cosine clamped to [-1,1]; either norm under 1e-12 gives 0 so degenerate
// all-zero segments match nothing instead of blowing up
float cosine(const Vec & a, const Vec & b);

// matrix-vector product, OpenMP over output rows
Vec matvec(const Mat & m, const Vec & x);

// double-precision variants used by the similarity and clustering paths,
// where monotonicity tolerances are tighter than f32 rounding
double dot_d(const float * a, const float * b, size_t n);
double l2_norm_d(const float * a, size_t n);
double cosine_d(const Vec & a, const Vec & b);

bool all_finite(const Vec & a);
bool all_finite(const Mat & m);

} // namespace dern
