#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dern/linalg.hpp"

namespace dern {

// one GLU expert: f(x) = W_d (silu(W_g x) * (W_u x))
struct expert_weights {
    Mat w_gate; // h x d
    Mat w_up;   // h x d
    Mat w_down; // d x h

    int hidden_size() const { return w_gate.rows; }
    int input_dim() const { return w_gate.cols; }

    bool operator==(const expert_weights & o) const = default;
};

struct router_weights {
    Mat gate; // N x d, row i produces the logit of expert i

    bool operator==(const router_weights & o) const = default;
};

struct moe_layer {
    std::vector<expert_weights> experts;
    router_weights router;
    int top_k = 1;

    int num_experts() const { return int(experts.size()); }
    int input_dim() const { return router.gate.cols; }

    bool operator==(const moe_layer & o) const = default;
};

struct moe_model {
    std::vector<moe_layer> layers;
    std::string name = "dern-model";
    std::string version = "1";

    bool operator==(const moe_model & o) const = default;
};

struct routing_decision {
    std::vector<int> indices;    // descending softmax weight, ties by lower id
    std::vector<double> weights; // softmax over all N, not renormalized
};

float silu(float z);

Vec expert_forward(const expert_weights & e, const Vec & x);

// softmax over all N logits, then pick the top_k heaviest
routing_decision route(const moe_layer & layer, const Vec & x);

// active-set weights renormalized to sum 1 before mixing expert outputs
Vec layer_forward(const moe_layer & layer, const Vec & x);

uint64_t param_count(const moe_model & m);

// shape invariants: matching h/d within experts, router rows = expert count,
// 1 <= top_k <= N, shared d across layers
void validate_model(const moe_model & m);

bool has_non_finite(const moe_model & m);

// ".dmoe" container: magic "DERNMOE1", u64-LE header length, JSON header,
// then 64-byte aligned row-major LE f32 tensors
void save_model(const moe_model & m, const std::string & path);
moe_model load_model(const std::string & path);

} // namespace dern
