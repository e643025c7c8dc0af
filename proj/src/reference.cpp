#include "dern/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dern::ref {

Vec matvec(const Mat & m, const Vec & x) {
    if (size_t(m.cols) != x.size()) {
        throw dim_error("ref::matvec: dimension mismatch");
    }
    Vec y(static_cast<size_t>(m.rows));
    for (int r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < m.cols; ++c) {
            acc += double(m.at(r, c)) * double(x[size_t(c)]);
        }
        y[size_t(r)] = float(acc);
    }
    return y;
}

Vec expert_forward_segment_sum(const expert_weights & e, const Vec & x) {
    const int h = e.hidden_size();
    const int d = e.input_dim();
    if (x.size() != size_t(d)) {
        throw dim_error("ref::expert_forward_segment_sum: dimension mismatch");
    }
    std::vector<double> acc(size_t(d), 0.0);
    for (int i = 0; i < h; ++i) {
        double g = 0.0, u = 0.0;
        for (int c = 0; c < d; ++c) {
            g += double(e.w_gate.at(i, c)) * double(x[size_t(c)]);
            u += double(e.w_up.at(i, c)) * double(x[size_t(c)]);
        }
        const double a = g / (1.0 + std::exp(-g)) * u;
        for (int t = 0; t < d; ++t) {
            acc[size_t(t)] += double(e.w_down.at(t, i)) * a;
        }
    }
    Vec out(static_cast<size_t>(d));
    for (int t = 0; t < d; ++t) {
        out[size_t(t)] = float(acc[size_t(t)]);
    }
    return out;
}

routing_decision route(const moe_layer & layer, const Vec & x) {
    const int n = layer.num_experts();
    const Vec logits = ref::matvec(layer.router.gate, x);

    double max_logit = double(logits[0]);
    for (int i = 1; i < n; ++i) {
        max_logit = std::max(max_logit, double(logits[size_t(i)]));
    }
    std::vector<double> w(static_cast<size_t>(n));
    double denom = 0.0;
    for (int i = 0; i < n; ++i) {
        w[size_t(i)] = std::exp(double(logits[size_t(i)]) - max_logit);
        denom += w[size_t(i)];
    }
    for (double & v : w) {
        v /= denom;
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (w[size_t(a)] != w[size_t(b)]) {
            return w[size_t(a)] > w[size_t(b)];
        }
        return a < b;
    });

    routing_decision rd;
    for (int s = 0; s < layer.top_k; ++s) {
        rd.indices.push_back(order[size_t(s)]);
        rd.weights.push_back(w[size_t(order[size_t(s)])]);
    }
    return rd;
}

Vec layer_forward(const moe_layer & layer, const Vec & x) {
    const routing_decision rd = ref::route(layer, x);
    double active_sum = 0.0;
    for (double w : rd.weights) {
        active_sum += w;
    }
    const int d = layer.input_dim();
    std::vector<double> acc(size_t(d), 0.0);
    for (size_t s = 0; s < rd.indices.size(); ++s) {
        const Vec gate = ref::matvec(layer.experts[size_t(rd.indices[s])].w_gate, x);
        const Vec up = ref::matvec(layer.experts[size_t(rd.indices[s])].w_up, x);
        Vec hidden(gate.size());
        for (size_t i = 0; i < gate.size(); ++i) {
            const double g = double(gate[i]);
            hidden[i] = float(g / (1.0 + std::exp(-g)) * double(up[i]));
        }
        const Vec y = ref::matvec(layer.experts[size_t(rd.indices[s])].w_down, hidden);
        const double w = rd.weights[s] / active_sum;
        for (int t = 0; t < d; ++t) {
            acc[size_t(t)] += w * double(y[size_t(t)]);
        }
    }
    Vec out(static_cast<size_t>(d));
    for (int t = 0; t < d; ++t) {
        out[size_t(t)] = float(acc[size_t(t)]);
    }
    return out;
}

routing_stats collect_stats(const moe_model & m, const calibration_set & calib) {
    if (calib.tokens.empty()) {
        throw arg_error("ref::collect_stats: empty calibration set");
    }
    routing_stats stats;
    stats.token_count = calib.size();
    stats.layers.resize(m.layers.size());
    for (size_t li = 0; li < m.layers.size(); ++li) {
        const moe_layer & layer = m.layers[li];
        layer_stats & ls = stats.layers[li];
        ls.score_accum.assign(size_t(layer.num_experts()), 0.0);
        ls.hit_count.assign(size_t(layer.num_experts()), 0);
        for (const Vec & x : calib.tokens) {
            const routing_decision rd = ref::route(layer, x);
            double active_sum = 0.0;
            for (double w : rd.weights) {
                active_sum += w;
            }
            for (size_t s = 0; s < rd.indices.size(); ++s) {
                ls.score_accum[size_t(rd.indices[s])] += rd.weights[s] / active_sum;
                ls.hit_count[size_t(rd.indices[s])] += 1;
            }
        }
    }
    return stats;
}

reassignment_result reassign(const segment_pool & pool,
                             const std::map<int, std::vector<segment>> & retained,
                             double alpha, const component_mask & mask) {
    reassignment_result result;
    for (const auto & [id, segs] : retained) {
        result.ext_segments[id] = {};
    }
    size_t assigned = 0;
    for (const segment & s : pool) {
        const Vec v = vectorize(s, mask);
        double best_sim = -2.0;
        int best_id = -1;
        for (const auto & [id, segs] : retained) {
            double sim = -2.0;
            for (const segment & t : segs) {
                sim = std::max(sim, cosine_d(v, vectorize(t, mask)));
            }
            if (sim > best_sim) {
                best_sim = sim;
                best_id = id;
            }
        }
        assignment_record rec;
        rec.source_expert = s.source_expert;
        rec.source_index = s.source_index;
        rec.best_similarity = best_sim;
        rec.target_expert = best_sim > alpha ? best_id : -1;
        if (rec.target_expert >= 0) {
            result.ext_segments[rec.target_expert].push_back(s);
            ++assigned;
        }
        result.assignments.push_back(rec);
    }
    result.retained_ratio = pool.empty() ? 0.0 : double(assigned) / double(pool.size());
    return result;
}

std::vector<int> kmeans_assign(const std::vector<Vec> & vectors,
                               const std::vector<Vec> & centroids) {
    std::vector<int> out(vectors.size(), 0);
    for (size_t i = 0; i < vectors.size(); ++i) {
        double best = -2.0;
        int best_j = 0;
        for (size_t j = 0; j < centroids.size(); ++j) {
            const double c = cosine_d(vectors[i], centroids[j]);
            if (c > best) {
                best = c;
                best_j = int(j);
            }
        }
        out[i] = best_j;
    }
    return out;
}

} // namespace dern::ref
