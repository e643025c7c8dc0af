#include "dern/linalg.hpp"

#include <cmath>

namespace dern {

static void check_same_len(const Vec & a, const Vec & b, const char * op) {
    if (a.size() != b.size()) {
        throw dim_error(std::string(op) + ": length mismatch (" +
                        std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    }
}

Vec Mat::row(int r) const {
    return Vec(row_ptr(r), row_ptr(r) + cols);
}

Vec Mat::col(int c) const {
    Vec out(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        out[size_t(r)] = at(r, c);
    }
    return out;
}

double dot_d(const float * a, const float * b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        acc += double(a[i]) * double(b[i]);
    }
    return acc;
}

double l2_norm_d(const float * a, size_t n) {
    return std::sqrt(dot_d(a, a, n));
}

double cosine_d(const Vec & a, const Vec & b) {
    if (a.size() != b.size()) {
        throw dim_error("cosine: length mismatch");
    }
    const double na = l2_norm_d(a.data(), a.size());
    const double nb = l2_norm_d(b.data(), b.size());
    if (na < 1e-12 || nb < 1e-12) {
        return 0.0;
    }
    double c = dot_d(a.data(), b.data(), a.size()) / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

float dot(const Vec & a, const Vec & b) {
    check_same_len(a, b, "dot");
    return float(dot_d(a.data(), b.data(), a.size()));
}

float l2_norm(const Vec & a) {
    return float(l2_norm_d(a.data(), a.size()));
}

float linf_norm(const Vec & a) {
    float best = 0.0f;
    for (float v : a) {
        const float m = std::fabs(v);
        if (m > best) {
            best = m;
        }
    }
    return best;
}

float cosine(const Vec & a, const Vec & b) {
    check_same_len(a, b, "cosine");
    return float(cosine_d(a, b));
}

Vec matvec(const Mat & m, const Vec & x) {
    if (size_t(m.cols) != x.size()) {
        throw dim_error("matvec: " + std::to_string(m.cols) + " cols vs x of length " +
                        std::to_string(x.size()));
    }
    Vec y(static_cast<size_t>(m.rows));
    // rows are independent, each one a full left-to-right reduction, so the
    // result is identical for any thread count; small products skip the
    // OpenMP runtime entirely (routing calls this from inside parallel loops)
    if (size_t(m.rows) * size_t(m.cols) > 16384) {
        #pragma omp parallel for schedule(static)
        for (int r = 0; r < m.rows; ++r) {
            y[size_t(r)] = float(dot_d(m.row_ptr(r), x.data(), size_t(m.cols)));
        }
    } else {
        for (int r = 0; r < m.rows; ++r) {
            y[size_t(r)] = float(dot_d(m.row_ptr(r), x.data(), size_t(m.cols)));
        }
    }
    return y;
}

bool all_finite(const Vec & a) {
    for (float v : a) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool all_finite(const Mat & m) {
    for (float v : m.data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

} // namespace dern
