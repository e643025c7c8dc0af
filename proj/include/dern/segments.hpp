#pragma once

#include <map>
#include <vector>

#include "dern/model.hpp"

namespace dern {

// neuron-level functional unit: row i of W_g and W_u, column i of W_d
struct segment {
    Vec gate_row;
    Vec up_row;
    Vec down_col;
    float weight = 0.0f; // importance inherited from the source expert
    int source_expert = -1;
    int source_index = -1;
};

struct component_mask {
    bool use_gate = true;
    bool use_up = true;
    bool use_down = true;

    int active_count() const { return int(use_gate) + int(use_up) + int(use_down); }
    bool full() const { return use_gate && use_up && use_down; }
};

// best ablation: similarity over up+down only
inline component_mask default_mask() { return component_mask{false, true, true}; }
inline component_mask full_mask() { return component_mask{true, true, true}; }

using segment_pool = std::vector<segment>;

struct assignment_record {
    int source_expert = -1;
    int source_index = -1;
    int target_expert = -1; // -1 when below threshold
    double best_similarity = 0.0;
};

struct reassignment_result {
    // keyed by retained expert id; every retained id has an entry
    std::map<int, std::vector<segment>> ext_segments;
    // per retained expert, filled by transfer_router_mass
    std::map<int, Vec> router_delta;
    double retained_ratio = 0.0;
    std::vector<assignment_record> assignments; // pool order
};

std::vector<segment> decompose(const expert_weights & e, float weight, int source_expert);

// inverse of decompose: h segments of equal d back into the three matrices
expert_weights reassemble(const std::vector<segment> & segs);

// concatenation in fixed gate -> up -> down order of the enabled components
Vec vectorize(const segment & s, const component_mask & mask);

// max cosine against any target segment, deterministic scan order
double sim_to_expert(const segment & s, const std::vector<segment> & targets,
                     const component_mask & mask);

// per pool segment: argmax retained expert (ties to lower id), assigned iff
// similarity > alpha strictly. Targets frozen at their original contents for
// the whole pass, so the result is order independent.
reassignment_result reassign(const segment_pool & pool,
                             const std::map<int, std::vector<segment>> & retained,
                             double alpha, const component_mask & mask);

// each assigned segment moves 1/n of its source router row (n = source
// intermediate size) onto its target row; pruned rows are then dropped and
// the matrix re-indexed to retained ids in ascending order
router_weights transfer_router_mass(reassignment_result & result,
                                    const router_weights & router,
                                    const std::map<int, int> & pruned_sizes);

} // namespace dern
