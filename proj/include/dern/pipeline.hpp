#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dern/calibration.hpp"
#include "dern/clustering.hpp"

namespace dern {

enum class baseline_kind { dern, prune_only, expert_average };

struct compress_params {
    int k_retain = 1;
    std::vector<int> k_retain_per_layer; // optional override, empty = global
    double alpha = 0.5;
    double ratio = 1.0;
    component_mask mask = default_mask();
    cluster_init init = cluster_init::gate_based;
    bool use_weights = true;
    int max_iters = 50;
    double tol = 1e-6;
    uint64_t seed = 0;
    baseline_kind baseline = baseline_kind::dern;
};

struct layer_report {
    std::vector<int> retained;
    std::vector<int> pruned;
    double retained_ratio = 0.0;
    std::vector<assignment_record> assignments;  // --dump-assignments
    std::vector<expert_cluster_info> clusters;   // --dump-clusters
};

struct compress_result {
    moe_model model;
    std::vector<layer_report> layers;
};

// stage 1 output (scores) in, compressed model out; covers the DERN pipeline
// and both simplified baselines
compress_result compress_model(const moe_model & m,
                               const std::vector<std::vector<double>> & scores,
                               const compress_params & params);

struct eval_layer {
    double mse = 0.0;
    double cosine = 0.0;
};

struct eval_report {
    double mse = 0.0;    // mean over layers
    double cosine = 0.0; // mean over layers
    uint64_t param_before = 0;
    uint64_t param_after = 0;
    double seconds = 0.0;
    std::vector<eval_layer> layers;
};

// per-layer output deviation on fresh gaussian probes (odd seed domain,
// disjoint from calibration)
eval_report evaluate_models(const moe_model & original, const moe_model & compressed,
                            int probes, uint64_t seed);

struct sim_report {
    // expert_level[i][j] = cos(flatten(E_i), flatten(E_j))
    std::vector<std::vector<double>> expert_level;
    // neuron_level[i][j][p] = max_q cos(seg_p of E_i, seg_q of E_j), full triplet
    std::vector<std::vector<std::vector<double>>> neuron_level;
};

sim_report similarity_report(const moe_model & m, int layer_index);

struct synth_spec {
    int d = 8;
    int h = 16;
    int n_experts = 4;
    int top_k = 2;
    int layers = 1;
    std::vector<std::vector<int>> groups; // partition of {0..N-1}; empty = singletons
    double noise_sigma = 0.0;
    uint64_t seed = 0;
};

// experts within a group share a base draw plus iid gaussian noise
moe_model gen_synthetic_model(const synth_spec & spec);

} // namespace dern
