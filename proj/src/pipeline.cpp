#include "dern/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dern/rng.hpp"

namespace dern {

namespace {

Vec flatten_expert(const expert_weights & e) {
    Vec v;
    v.reserve(e.w_gate.data.size() + e.w_up.data.size() + e.w_down.data.size());
    v.insert(v.end(), e.w_gate.data.begin(), e.w_gate.data.end());
    v.insert(v.end(), e.w_up.data.begin(), e.w_up.data.end());
    v.insert(v.end(), e.w_down.data.begin(), e.w_down.data.end());
    return v;
}

int retain_count_for_layer(const compress_params & params, size_t layer, int n_experts) {
    int k = params.k_retain;
    if (!params.k_retain_per_layer.empty()) {
        if (layer >= params.k_retain_per_layer.size()) {
            throw arg_error("per-layer retain list shorter than layer count");
        }
        k = params.k_retain_per_layer[layer];
    }
    if (k < 1 || k > n_experts) {
        throw arg_error("retain count " + std::to_string(k) + " out of range for " +
                        std::to_string(n_experts) + " experts");
    }
    return k;
}

moe_layer prune_only_layer(const moe_layer & layer, const std::vector<int> & retained) {
    moe_layer out;
    out.top_k = std::min(layer.top_k, int(retained.size()));
    out.router.gate = Mat(int(retained.size()), layer.router.gate.cols);
    for (size_t r = 0; r < retained.size(); ++r) {
        out.experts.push_back(layer.experts[size_t(retained[r])]);
        for (int c = 0; c < layer.router.gate.cols; ++c) {
            out.router.gate.at(int(r), c) = layer.router.gate.at(retained[r], c);
        }
    }
    return out;
}

moe_layer expert_average_layer(const moe_layer & layer, const std::vector<int> & retained,
                               const std::vector<int> & pruned,
                               const std::vector<double> & scores) {
    const int d = layer.input_dim();
    for (int o : pruned) {
        if (layer.experts[size_t(o)].hidden_size() != layer.experts[size_t(retained[0])].hidden_size()) {
            throw dim_error("expert_average: experts must share intermediate size");
        }
    }

    std::vector<Vec> flat(layer.experts.size());
    for (size_t i = 0; i < layer.experts.size(); ++i) {
        flat[i] = flatten_expert(layer.experts[i]);
    }

    // group each pruned expert with its most similar retained expert
    std::map<int, std::vector<int>> group; // retained id -> pruned members
    for (int r : retained) {
        group[r] = {};
    }
    for (int o : pruned) {
        double best = -2.0;
        int best_r = retained[0];
        for (int r : retained) {
            const double c = cosine_d(flat[size_t(o)], flat[size_t(r)]);
            if (c > best) {
                best = c;
                best_r = r;
            }
        }
        group[best_r].push_back(o);
    }

    moe_layer out;
    out.top_k = std::min(layer.top_k, int(retained.size()));
    out.router.gate = Mat(int(retained.size()), d);

    int row = 0;
    for (int r : retained) {
        std::vector<int> members = {r};
        members.insert(members.end(), group[r].begin(), group[r].end());

        double w_sum = 0.0;
        for (int e : members) {
            w_sum += scores[size_t(e)];
        }
        const bool uniform = w_sum < 1e-12;

        const expert_weights & first = layer.experts[size_t(r)];
        expert_weights merged;
        merged.w_gate = Mat(first.w_gate.rows, first.w_gate.cols);
        merged.w_up = Mat(first.w_up.rows, first.w_up.cols);
        merged.w_down = Mat(first.w_down.rows, first.w_down.cols);

        auto accumulate = [&](Mat & dst, auto member_mat) {
            std::vector<double> acc(dst.data.size(), 0.0);
            for (int e : members) {
                const double w = uniform ? 1.0 / double(members.size()) : scores[size_t(e)] / w_sum;
                const Mat & src = member_mat(e);
                for (size_t t = 0; t < acc.size(); ++t) {
                    acc[t] += w * double(src.data[t]);
                }
            }
            for (size_t t = 0; t < acc.size(); ++t) {
                dst.data[t] = float(acc[t]);
            }
        };
        accumulate(merged.w_gate, [&](int e) -> const Mat & { return layer.experts[size_t(e)].w_gate; });
        accumulate(merged.w_up, [&](int e) -> const Mat & { return layer.experts[size_t(e)].w_up; });
        accumulate(merged.w_down, [&](int e) -> const Mat & { return layer.experts[size_t(e)].w_down; });
        out.experts.push_back(std::move(merged));

        // router rows of merged experts are summed
        for (int c = 0; c < d; ++c) {
            double acc = double(layer.router.gate.at(r, c));
            for (int o : group[r]) {
                acc += double(layer.router.gate.at(o, c));
            }
            out.router.gate.at(row, c) = float(acc);
        }
        ++row;
    }
    return out;
}

void compress_one_layer(const moe_layer & layer, const std::vector<double> & layer_scores,
                        const compress_params & params, size_t li, compress_result & result) {
    const int n = layer.num_experts();
    if (layer_scores.size() != size_t(n)) {
        throw arg_error("score count mismatch");
    }
    const int k_retain = retain_count_for_layer(params, li, n);
    auto [retained, pruned] = select_retained(layer_scores, k_retain);

    layer_report report;
    report.retained = retained;
    report.pruned = pruned;

    switch (params.baseline) {
        case baseline_kind::prune_only: {
            result.model.layers.push_back(prune_only_layer(layer, retained));
            report.retained_ratio = 0.0;
            break;
        }
        case baseline_kind::expert_average: {
            result.model.layers.push_back(
                expert_average_layer(layer, retained, pruned, layer_scores));
            report.retained_ratio = pruned.empty() ? 0.0 : 1.0;
            break;
        }
        case baseline_kind::dern: {
            std::map<int, std::vector<segment>> internal;
            for (int r : retained) {
                internal[r] = decompose(layer.experts[size_t(r)],
                                        float(layer_scores[size_t(r)]), r);
            }
            segment_pool pool;
            std::map<int, int> pruned_sizes;
            for (int o : pruned) {
                std::vector<segment> segs =
                    decompose(layer.experts[size_t(o)], float(layer_scores[size_t(o)]), o);
                pool.insert(pool.end(), segs.begin(), segs.end());
                pruned_sizes[o] = layer.experts[size_t(o)].hidden_size();
            }

            reassignment_result rr = reassign(pool, internal, params.alpha, params.mask);
            const router_weights new_router = transfer_router_mass(rr, layer.router, pruned_sizes);

            cluster_config cc;
            cc.max_iters = params.max_iters;
            cc.tol = params.tol;
            cc.init = params.init;
            cc.use_weights = params.use_weights;
            cc.mask = params.mask;
            cc.seed = mix_seed(params.seed, uint64_t(li));

            result.model.layers.push_back(compress_layer(layer, retained, internal, rr, new_router,
                                                         params.ratio, cc, &report.clusters));
            report.retained_ratio = rr.retained_ratio;
            report.assignments = std::move(rr.assignments);
            break;
        }
    }
    result.layers.push_back(std::move(report));
}

} // namespace

compress_result compress_model(const moe_model & m,
                               const std::vector<std::vector<double>> & scores,
                               const compress_params & params) {
    validate_model(m);
    if (scores.size() != m.layers.size()) {
        throw arg_error("compress: score list does not match layer count");
    }
    if (params.alpha < 0.0 || params.alpha > 1.0) {
        throw arg_error("compress: alpha must lie in [0,1]");
    }
    if (params.ratio <= 0.0 || params.ratio > 1.0) {
        throw arg_error("compress: ratio must lie in (0,1]");
    }

    compress_result result;
    result.model.name = m.name;
    result.model.version = m.version;

    for (size_t li = 0; li < m.layers.size(); ++li) {
        const auto with_layer = [li](const auto & e) {
            return "layer " + std::to_string(li) + ": " + e.what();
        };
        try {
            compress_one_layer(m.layers[li], scores[li], params, li, result);
        } catch (const dim_error & e) {
            throw dim_error(with_layer(e));
        } catch (const arg_error & e) {
            throw arg_error(with_layer(e));
        } catch (const numeric_error & e) {
            throw numeric_error(with_layer(e));
        }
    }

    validate_model(result.model);
    return result;
}

eval_report evaluate_models(const moe_model & original, const moe_model & compressed,
                            int probes, uint64_t seed) {
    validate_model(original);
    validate_model(compressed);
    if (original.layers.size() != compressed.layers.size()) {
        throw dim_error("evaluate: layer count mismatch");
    }
    if (probes < 1) {
        throw arg_error("evaluate: probes must be >= 1");
    }

    eval_report report;
    report.param_before = param_count(original);
    report.param_after = param_count(compressed);
    if (original.layers.empty()) {
        return report;
    }

    const int d = original.layers[0].input_dim();
    if (compressed.layers[0].input_dim() != d) {
        throw dim_error("evaluate: input dim mismatch");
    }
    const calibration_set probe_set = synth_calibration(d, probes, probe_seed(seed));

    for (size_t li = 0; li < original.layers.size(); ++li) {
        std::vector<double> se(size_t(probes), 0.0);
        std::vector<double> cs(size_t(probes), 0.0);
        #pragma omp parallel for schedule(static)
        for (int p = 0; p < probes; ++p) {
            const Vec & x = probe_set.tokens[size_t(p)];
            const Vec yo = layer_forward(original.layers[li], x);
            const Vec yc = layer_forward(compressed.layers[li], x);
            double s = 0.0;
            for (int t = 0; t < d; ++t) {
                const double diff = double(yo[size_t(t)]) - double(yc[size_t(t)]);
                s += diff * diff;
            }
            se[size_t(p)] = s / double(d);
            cs[size_t(p)] = cosine_d(yo, yc);
        }
        eval_layer el;
        for (int p = 0; p < probes; ++p) {
            el.mse += se[size_t(p)];
            el.cosine += cs[size_t(p)];
        }
        el.mse /= double(probes);
        el.cosine /= double(probes);
        report.layers.push_back(el);
    }

    for (const eval_layer & el : report.layers) {
        report.mse += el.mse;
        report.cosine += el.cosine;
    }
    report.mse /= double(report.layers.size());
    report.cosine /= double(report.layers.size());
    return report;
}

sim_report similarity_report(const moe_model & m, int layer_index) {
    validate_model(m);
    if (layer_index < 0 || size_t(layer_index) >= m.layers.size()) {
        throw arg_error("similarity_report: invalid layer index");
    }
    const moe_layer & layer = m.layers[size_t(layer_index)];
    const int n = layer.num_experts();

    std::vector<Vec> flat(static_cast<size_t>(n));
    std::vector<std::vector<Vec>> seg_vecs(static_cast<size_t>(n));
    const component_mask triplet = full_mask();
    for (int i = 0; i < n; ++i) {
        flat[size_t(i)] = flatten_expert(layer.experts[size_t(i)]);
        const std::vector<segment> segs = decompose(layer.experts[size_t(i)], 0.0f, i);
        seg_vecs[size_t(i)].reserve(segs.size());
        for (const segment & s : segs) {
            seg_vecs[size_t(i)].push_back(vectorize(s, triplet));
        }
    }

    sim_report report;
    report.expert_level.assign(size_t(n), std::vector<double>(size_t(n), 0.0));
    report.neuron_level.assign(size_t(n), std::vector<std::vector<double>>(size_t(n)));

    #pragma omp parallel for schedule(static)
    for (int pair = 0; pair < n * n; ++pair) {
        const int i = pair / n;
        const int j = pair % n;
        report.expert_level[size_t(i)][size_t(j)] = cosine_d(flat[size_t(i)], flat[size_t(j)]);

        const size_t hi = seg_vecs[size_t(i)].size();
        std::vector<double> row(hi, 0.0);
        for (size_t p = 0; p < hi; ++p) {
            double best = -2.0;
            for (const Vec & q : seg_vecs[size_t(j)]) {
                best = std::max(best, cosine_d(seg_vecs[size_t(i)][p], q));
            }
            row[p] = best;
        }
        report.neuron_level[size_t(i)][size_t(j)] = std::move(row);
    }
    return report;
}

moe_model gen_synthetic_model(const synth_spec & spec) {
    if (spec.d < 1 || spec.h < 1 || spec.n_experts < 1 || spec.layers < 1) {
        throw arg_error("gen: d, h, experts and layers must be >= 1");
    }
    if (spec.top_k < 1 || spec.top_k > spec.n_experts) {
        throw arg_error("gen: top_k out of range");
    }
    if (spec.noise_sigma < 0.0 || !std::isfinite(spec.noise_sigma)) {
        throw arg_error("gen: noise must be finite and >= 0");
    }

    std::vector<std::vector<int>> groups = spec.groups;
    if (groups.empty()) {
        for (int i = 0; i < spec.n_experts; ++i) {
            groups.push_back({i});
        }
    }
    {
        std::vector<int> all;
        for (const auto & g : groups) {
            all.insert(all.end(), g.begin(), g.end());
        }
        std::sort(all.begin(), all.end());
        std::vector<int> want(static_cast<size_t>(spec.n_experts));
        std::iota(want.begin(), want.end(), 0);
        if (all != want) {
            throw arg_error("gen: groups must partition expert ids 0.." +
                            std::to_string(spec.n_experts - 1));
        }
    }

    rng r(spec.seed);
    auto fill_gauss = [&](Mat & m) {
        for (float & v : m.data) {
            v = r.gaussian_f();
        }
    };

    moe_model model;
    model.name = "synthetic";
    for (int li = 0; li < spec.layers; ++li) {
        moe_layer layer;
        layer.top_k = spec.top_k;
        layer.experts.resize(size_t(spec.n_experts));
        for (const auto & g : groups) {
            expert_weights base;
            base.w_gate = Mat(spec.h, spec.d);
            base.w_up = Mat(spec.h, spec.d);
            base.w_down = Mat(spec.d, spec.h);
            fill_gauss(base.w_gate);
            fill_gauss(base.w_up);
            fill_gauss(base.w_down);
            for (int e : g) {
                expert_weights ew = base;
                auto perturb = [&](Mat & m) {
                    for (float & v : m.data) {
                        v = float(double(v) + spec.noise_sigma * r.gaussian());
                    }
                };
                perturb(ew.w_gate);
                perturb(ew.w_up);
                perturb(ew.w_down);
                layer.experts[size_t(e)] = std::move(ew);
            }
        }
        // 1/sqrt(d) rows give unit-variance logits, the regime a trained
        // router operates in; N(0,1) rows would saturate the softmax
        layer.router.gate = Mat(spec.n_experts, spec.d);
        const double router_scale = 1.0 / std::sqrt(double(spec.d));
        for (float & v : layer.router.gate.data) {
            v = float(router_scale * r.gaussian());
        }
        model.layers.push_back(std::move(layer));
    }
    validate_model(model);
    return model;
}

} // namespace dern
