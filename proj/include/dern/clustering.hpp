#pragma once

#include <cstdint>
#include <vector>

#include "dern/segments.hpp"

namespace dern {

enum class cluster_init {
    gate_based, // top-k segments by ℓ∞ norm of the gate row
    random_choice,
    equidistant, // evenly spaced over the cosine-to-mean-direction order
};

struct cluster_config {
    int k = 1;
    int max_iters = 50;
    double tol = 1e-6; // absolute objective improvement below which we stop
    cluster_init init = cluster_init::gate_based;
    bool use_weights = true;
    component_mask mask = default_mask();
    uint64_t seed = 0;
};

struct cluster_state {
    std::vector<int> assignment;         // segment index -> cluster id
    std::vector<Vec> centroids;          // unit vectors in masked space
    std::vector<double> mean_norms;      // r̄_j per cluster
    std::vector<double> objective_trace; // one entry per iteration, non-increasing
};

// sum over clusters and members of w_i * (1 - cos(v_i, c_j));
// w_i treated as 1 when use_weights is off
double objective(const std::vector<segment> & segs, const cluster_state & state,
                 const cluster_config & cfg);

std::vector<Vec> init_centroids(const std::vector<segment> & segs,
                                const cluster_config & cfg);

// spherical weighted k-means: max-cosine assignment (ties to lower cluster
// id), norm-equalized weighted centroid update, empty-cluster repair from the
// largest cluster's least-aligned member
cluster_state run_kmeans(const std::vector<segment> & segs, const cluster_config & cfg);

// cluster j becomes neuron j: masked centroid parts rescaled by r̄_j, parts
// outside the mask filled with the cluster's raw weighted component average
expert_weights reconstruct_expert(const std::vector<segment> & segs,
                                  const cluster_state & state,
                                  const cluster_config & cfg);

// --dump-clusters diagnostics
struct expert_cluster_info {
    int expert_id = -1;
    std::vector<int> member_count;
    std::vector<double> r_bar;
    double final_objective = 0.0;
};

// per retained expert: union internal + reassigned segments, k-means down to
// ceil(ratio * original h), reconstruct, assemble with the transferred router
moe_layer compress_layer(const moe_layer & original,
                         const std::vector<int> & retained,
                         const std::map<int, std::vector<segment>> & internal_segments,
                         const reassignment_result & reassignment,
                         const router_weights & new_router,
                         double ratio,
                         const cluster_config & cfg,
                         std::vector<expert_cluster_info> * diag = nullptr);

} // namespace dern
