#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dern/model.hpp"

namespace dern {

struct calibration_set {
    std::vector<Vec> tokens;
    std::string source;

    int dim() const { return tokens.empty() ? 0 : int(tokens[0].size()); }
    int size() const { return int(tokens.size()); }
};

struct layer_stats {
    std::vector<double> score_accum; // sum over tokens of renormalized active-set weight
    std::vector<int64_t> hit_count;
};

struct routing_stats {
    std::vector<layer_stats> layers;
    int64_t token_count = 0;
};

// single streaming pass; per-layer statistics over the same raw input
// vectors, no inter-layer propagation
routing_stats collect_stats(const moe_model & m, const calibration_set & calib);

// S_i = score_accum_i / token_count, per layer
std::vector<std::vector<double>> importance_scores(const routing_stats & stats);

// top k_retain by score, ties to the lower expert id; both lists ascending
std::pair<std::vector<int>, std::vector<int>>
select_retained(const std::vector<double> & scores, int k_retain);

// m iid standard-normal d-vectors from a seeded deterministic stream
calibration_set synth_calibration(int d, int m, uint64_t seed);

// ".cal" file: magic "DERNCAL1", u64-LE count, u64-LE dim, LE f32 values
void save_calibration(const calibration_set & c, const std::string & path);
calibration_set load_calibration(const std::string & path);

} // namespace dern
