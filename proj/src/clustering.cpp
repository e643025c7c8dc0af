#include "dern/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dern/rng.hpp"

namespace dern {

namespace {

constexpr double k_zero_norm = 1e-12;
constexpr double k_seed_dup_cos = 0.995; // gate-based seeds closer than this collapse

struct masked_data {
    std::vector<Vec> v;        // masked segment vectors
    std::vector<double> norm;  // double-precision norms
    int dim = 0;
};

masked_data vectorize_all(const std::vector<segment> & segs, const component_mask & mask) {
    masked_data data;
    data.v.reserve(segs.size());
    data.norm.reserve(segs.size());
    for (const segment & s : segs) {
        Vec v = vectorize(s, mask);
        data.norm.push_back(l2_norm_d(v.data(), v.size()));
        data.v.push_back(std::move(v));
    }
    data.dim = data.v.empty() ? 0 : int(data.v[0].size());
    return data;
}

std::vector<double> effective_weights(const std::vector<segment> & segs, bool use_weights) {
    std::vector<double> w(segs.size(), 1.0);
    if (use_weights) {
        for (size_t i = 0; i < segs.size(); ++i) {
            w[i] = double(segs[i].weight);
        }
    }
    return w;
}

Vec unit_or_basis(const Vec & v, double norm, int fallback_axis) {
    Vec c(v.size(), 0.0f);
    if (norm < k_zero_norm) {
        c[size_t(fallback_axis) % c.size()] = 1.0f;
        return c;
    }
    for (size_t t = 0; t < v.size(); ++t) {
        c[t] = float(double(v[t]) / norm);
    }
    return c;
}

double objective_internal(const masked_data & data, const std::vector<double> & w,
                          const std::vector<int> & assignment,
                          const std::vector<Vec> & centroids) {
    double total = 0.0;
    for (size_t i = 0; i < data.v.size(); ++i) {
        total += w[i] * (1.0 - cosine_d(data.v[i], centroids[size_t(assignment[i])]));
    }
    return total;
}

// move the least-aligned member of the largest cluster into each empty one
void repair_empty_clusters(const masked_data & data, std::vector<int> & assignment,
                           std::vector<Vec> & centroids, int k) {
    const int n = int(data.v.size());
    while (true) {
        std::vector<int> counts(size_t(k), 0);
        for (int a : assignment) {
            counts[size_t(a)] += 1;
        }
        int empty = -1;
        for (int j = 0; j < k; ++j) {
            if (counts[size_t(j)] == 0) {
                empty = j;
                break;
            }
        }
        if (empty < 0) {
            return;
        }
        int largest = 0;
        for (int j = 1; j < k; ++j) {
            if (counts[size_t(j)] > counts[size_t(largest)]) {
                largest = j;
            }
        }
        // n >= k guarantees the largest cluster has at least two members here
        int donor = -1;
        double donor_cos = 2.0;
        for (int i = 0; i < n; ++i) {
            if (assignment[size_t(i)] != largest) {
                continue;
            }
            double c = cosine_d(data.v[size_t(i)], centroids[size_t(largest)]);
            if (c < donor_cos) {
                donor_cos = c;
                donor = i;
            }
        }
        assignment[size_t(donor)] = empty;
        centroids[size_t(empty)] = unit_or_basis(data.v[size_t(donor)], data.norm[size_t(donor)], empty);
    }
}

void update_centroids(const masked_data & data, const std::vector<double> & w,
                      const std::vector<int> & assignment, std::vector<Vec> & centroids,
                      std::vector<double> & mean_norms, int k) {
    const int n = int(data.v.size());
    const int dim = data.dim;
    #pragma omp parallel for schedule(static)
    for (int j = 0; j < k; ++j) {
        // members in segment-index order; sums are fixed-order left-to-right
        double norm_sum = 0.0;
        double w_sum = 0.0;
        int count = 0;
        for (int i = 0; i < n; ++i) {
            if (assignment[size_t(i)] != j) {
                continue;
            }
            norm_sum += data.norm[size_t(i)];
            w_sum += w[size_t(i)];
            ++count;
        }
        if (count == 0) {
            continue; // repaired beforehand; keeps state sane if called standalone
        }
        const double r_bar = norm_sum / double(count);
        mean_norms[size_t(j)] = r_bar;

        const bool uniform = w_sum < k_zero_norm; // all-zero weights fall back to uniform
        std::vector<double> acc(size_t(dim), 0.0);
        for (int i = 0; i < n; ++i) {
            if (assignment[size_t(i)] != j || data.norm[size_t(i)] < k_zero_norm) {
                continue; // zero-norm members have no direction to contribute
            }
            const double wt = uniform ? 1.0 / double(count) : w[size_t(i)] / w_sum;
            const double scale = wt * r_bar / data.norm[size_t(i)];
            const Vec & v = data.v[size_t(i)];
            for (int t = 0; t < dim; ++t) {
                acc[size_t(t)] += scale * double(v[size_t(t)]);
            }
        }
        double acc_norm = 0.0;
        for (double a : acc) {
            acc_norm += a * a;
        }
        acc_norm = std::sqrt(acc_norm);
        if (acc_norm < k_zero_norm) {
            continue; // degenerate (all members zero-norm or exact cancellation):
                      // keep the previous centroid rather than failing the run
        }
        for (int t = 0; t < dim; ++t) {
            centroids[size_t(j)][size_t(t)] = float(acc[size_t(t)] / acc_norm);
        }
    }
}

void check_config(const std::vector<segment> & segs, const cluster_config & cfg) {
    if (segs.empty()) {
        throw arg_error("clustering: no segments");
    }
    if (cfg.k < 1 || size_t(cfg.k) > segs.size()) {
        throw arg_error("clustering: k must lie in [1, segment count]");
    }
    if (cfg.max_iters < 1) {
        throw arg_error("clustering: max_iters must be >= 1");
    }
    if (cfg.tol < 0.0) {
        throw arg_error("clustering: tol must be >= 0");
    }
}

} // namespace

double objective(const std::vector<segment> & segs, const cluster_state & state,
                 const cluster_config & cfg) {
    const masked_data data = vectorize_all(segs, cfg.mask);
    const std::vector<double> w = effective_weights(segs, cfg.use_weights);
    return objective_internal(data, w, state.assignment, state.centroids);
}

std::vector<Vec> init_centroids(const std::vector<segment> & segs, const cluster_config & cfg) {
    check_config(segs, cfg);
    const int n = int(segs.size());
    const int k = cfg.k;
    const masked_data data = vectorize_all(segs, cfg.mask);

    std::vector<int> chosen;
    chosen.reserve(size_t(k));

    switch (cfg.init) {
        case cluster_init::gate_based: {
            std::vector<float> bound(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                bound[size_t(i)] = linf_norm(segs[size_t(i)].gate_row);
            }
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (bound[size_t(a)] != bound[size_t(b)]) {
                    return bound[size_t(a)] > bound[size_t(b)];
                }
                return a < b;
            });
            // Seeding two near-copies of the same segment wastes a cluster on
            // a duplicate direction and starves some other direction, which
            // Lloyd iterations never recover from. Walk the ranking, skip
            // candidates nearly collinear with an accepted seed, and backfill
            // in rank order if the distinct ones run out.
            std::vector<char> taken(static_cast<size_t>(n), 0);
            for (int idx : order) {
                if (int(chosen.size()) >= k) {
                    break;
                }
                bool duplicate = false;
                for (int a : chosen) {
                    if (cosine_d(data.v[size_t(idx)], data.v[size_t(a)]) > k_seed_dup_cos) {
                        duplicate = true;
                        break;
                    }
                }
                if (!duplicate) {
                    chosen.push_back(idx);
                    taken[size_t(idx)] = 1;
                }
            }
            for (int idx : order) {
                if (int(chosen.size()) >= k) {
                    break;
                }
                if (!taken[size_t(idx)]) {
                    chosen.push_back(idx);
                }
            }
            break;
        }
        case cluster_init::random_choice: {
            rng r(cfg.seed);
            std::vector<int> idx(static_cast<size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
            for (int i = 0; i < k; ++i) {
                const int j = i + int(r.below(uint64_t(n - i)));
                std::swap(idx[size_t(i)], idx[size_t(j)]);
                chosen.push_back(idx[size_t(i)]);
            }
            break;
        }
        case cluster_init::equidistant: {
            // weighted mean direction over the positive-norm segments
            const std::vector<double> w = effective_weights(segs, cfg.use_weights);
            Vec mean_dir(size_t(data.dim), 0.0f);
            {
                std::vector<double> acc(size_t(data.dim), 0.0);
                for (int i = 0; i < n; ++i) {
                    if (data.norm[size_t(i)] < k_zero_norm) {
                        continue;
                    }
                    const double scale = w[size_t(i)] / data.norm[size_t(i)];
                    for (int t = 0; t < data.dim; ++t) {
                        acc[size_t(t)] += scale * double(data.v[size_t(i)][size_t(t)]);
                    }
                }
                for (int t = 0; t < data.dim; ++t) {
                    mean_dir[size_t(t)] = float(acc[size_t(t)]);
                }
            }
            std::vector<double> cos_to_mean(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                cos_to_mean[size_t(i)] = cosine_d(data.v[size_t(i)], mean_dir);
            }
            std::vector<int> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (cos_to_mean[size_t(a)] != cos_to_mean[size_t(b)]) {
                    return cos_to_mean[size_t(a)] > cos_to_mean[size_t(b)];
                }
                return a < b;
            });
            if (k == 1) {
                chosen.push_back(order[size_t((n - 1) / 2)]);
            } else {
                for (int j = 0; j < k; ++j) {
                    const auto pos = size_t(std::llround(double(j) * double(n - 1) / double(k - 1)));
                    chosen.push_back(order[pos]);
                }
            }
            break;
        }
    }

    std::vector<Vec> centroids;
    centroids.reserve(size_t(k));
    for (int j = 0; j < k; ++j) {
        const int idx = chosen[size_t(j)];
        centroids.push_back(unit_or_basis(data.v[size_t(idx)], data.norm[size_t(idx)], j));
    }
    return centroids;
}

cluster_state run_kmeans(const std::vector<segment> & segs, const cluster_config & cfg) {
    check_config(segs, cfg);
    const int n = int(segs.size());
    const int k = cfg.k;
    const masked_data data = vectorize_all(segs, cfg.mask);
    const std::vector<double> w = effective_weights(segs, cfg.use_weights);

    cluster_state state;
    state.centroids = init_centroids(segs, cfg);
    state.assignment.assign(size_t(n), -1);
    state.mean_norms.assign(size_t(k), 0.0);

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        std::vector<int> next(static_cast<size_t>(n));
        #pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            double best = -2.0;
            int best_j = 0;
            for (int j = 0; j < k; ++j) {
                const double c = cosine_d(data.v[size_t(i)], state.centroids[size_t(j)]);
                if (c > best) { // strict: lower cluster id keeps exact ties
                    best = c;
                    best_j = j;
                }
            }
            next[size_t(i)] = best_j;
        }

        // unchanged assignment means the update would reproduce the same
        // centroids: exact fixed point
        if (iter > 0 && next == state.assignment) {
            break;
        }
        state.assignment = std::move(next);

        repair_empty_clusters(data, state.assignment, state.centroids, k);
        update_centroids(data, w, state.assignment, state.centroids, state.mean_norms, k);

        state.objective_trace.push_back(
            objective_internal(data, w, state.assignment, state.centroids));

        const size_t t = state.objective_trace.size();
        if (t >= 2 && state.objective_trace[t - 2] - state.objective_trace[t - 1] < cfg.tol) {
            break;
        }
    }
    return state;
}

expert_weights reconstruct_expert(const std::vector<segment> & segs, const cluster_state & state,
                                  const cluster_config & cfg) {
    const int n = int(segs.size());
    const int k = int(state.centroids.size());
    const int d = int(segs[0].gate_row.size());
    const std::vector<double> w = effective_weights(segs, cfg.use_weights);

    std::vector<segment> neurons(static_cast<size_t>(k));

    #pragma omp parallel for schedule(static)
    for (int j = 0; j < k; ++j) {
        segment & out = neurons[size_t(j)];
        out.gate_row.assign(size_t(d), 0.0f);
        out.up_row.assign(size_t(d), 0.0f);
        out.down_col.assign(size_t(d), 0.0f);

        // masked components come straight from the centroid, rescaled by the
        // cluster's mean member norm
        const Vec & c = state.centroids[size_t(j)];
        const double r_bar = state.mean_norms[size_t(j)];
        size_t pos = 0;
        auto take = [&](Vec & dst) {
            for (int t = 0; t < d; ++t) {
                dst[size_t(t)] = float(double(c[pos + size_t(t)]) * r_bar);
            }
            pos += size_t(d);
        };
        if (cfg.mask.use_gate) take(out.gate_row);
        if (cfg.mask.use_up) take(out.up_row);
        if (cfg.mask.use_down) take(out.down_col);

        // components outside the mask: raw weighted average of the members
        if (!cfg.mask.full()) {
            double w_sum = 0.0;
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (state.assignment[size_t(i)] == j) {
                    w_sum += w[size_t(i)];
                    ++count;
                }
            }
            if (count > 0) {
                const bool uniform = w_sum < 1e-12;
                std::vector<double> acc_gate(size_t(d), 0.0), acc_up(size_t(d), 0.0),
                    acc_down(size_t(d), 0.0);
                for (int i = 0; i < n; ++i) {
                    if (state.assignment[size_t(i)] != j) {
                        continue;
                    }
                    const double wt = uniform ? 1.0 / double(count) : w[size_t(i)] / w_sum;
                    const segment & s = segs[size_t(i)];
                    for (int t = 0; t < d; ++t) {
                        acc_gate[size_t(t)] += wt * double(s.gate_row[size_t(t)]);
                        acc_up[size_t(t)] += wt * double(s.up_row[size_t(t)]);
                        acc_down[size_t(t)] += wt * double(s.down_col[size_t(t)]);
                    }
                }
                auto fill = [&](Vec & dst, const std::vector<double> & acc) {
                    for (int t = 0; t < d; ++t) {
                        dst[size_t(t)] = float(acc[size_t(t)]);
                    }
                };
                if (!cfg.mask.use_gate) fill(out.gate_row, acc_gate);
                if (!cfg.mask.use_up) fill(out.up_row, acc_up);
                if (!cfg.mask.use_down) fill(out.down_col, acc_down);
            }
        }
    }

    return reassemble(neurons);
}

moe_layer compress_layer(const moe_layer & original,
                         const std::vector<int> & retained,
                         const std::map<int, std::vector<segment>> & internal_segments,
                         const reassignment_result & reassignment,
                         const router_weights & new_router,
                         double ratio,
                         const cluster_config & cfg,
                         std::vector<expert_cluster_info> * diag) {
    if (ratio <= 0.0 || ratio > 1.0) {
        throw arg_error("compress_layer: ratio must lie in (0,1]");
    }

    moe_layer out;
    out.router = new_router;
    out.top_k = std::min(original.top_k, int(retained.size()));

    for (int r : retained) {
        std::vector<segment> segs = internal_segments.at(r);
        const std::vector<segment> & ext = reassignment.ext_segments.at(r);
        segs.insert(segs.end(), ext.begin(), ext.end());

        const int h_orig = original.experts[size_t(r)].hidden_size();
        int k = int(std::ceil(ratio * double(h_orig)));
        k = std::clamp(k, 1, int(segs.size()));

        cluster_config cc = cfg;
        cc.k = k;
        cc.seed = mix_seed(cfg.seed, uint64_t(r));

        const cluster_state state = run_kmeans(segs, cc);
        out.experts.push_back(reconstruct_expert(segs, state, cc));

        if (diag != nullptr) {
            expert_cluster_info info;
            info.expert_id = r;
            info.member_count.assign(size_t(k), 0);
            for (int a : state.assignment) {
                info.member_count[size_t(a)] += 1;
            }
            info.r_bar = state.mean_norms;
            info.final_objective =
                state.objective_trace.empty() ? 0.0 : state.objective_trace.back();
            diag->push_back(std::move(info));
        }
    }
    return out;
}

} // namespace dern
