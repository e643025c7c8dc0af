#pragma once

// Serial reference implementations of the parallel kernels. Kept deliberately
// naive: tests check the OpenMP paths against these, and the benchmark
// compares their speed.

#include "dern/calibration.hpp"
#include "dern/clustering.hpp"

namespace dern::ref {

Vec matvec(const Mat & m, const Vec & x);

// Eq-by-hand segment-sum form of the GLU forward, all-double arithmetic:
// sum_i down_col_i * silu(gate_row_i . x) * (up_row_i . x)
Vec expert_forward_segment_sum(const expert_weights & e, const Vec & x);

// full sort over (weight desc, id asc) instead of partial selection
routing_decision route(const moe_layer & layer, const Vec & x);

Vec layer_forward(const moe_layer & layer, const Vec & x);

routing_stats collect_stats(const moe_model & m, const calibration_set & calib);

reassignment_result reassign(const segment_pool & pool,
                             const std::map<int, std::vector<segment>> & retained,
                             double alpha, const component_mask & mask);

// one serial assignment step against fixed centroids
std::vector<int> kmeans_assign(const std::vector<Vec> & vectors,
                               const std::vector<Vec> & centroids);

} // namespace dern::ref
