#include "dern/segments.hpp"

#include <algorithm>

namespace dern {

std::vector<segment> decompose(const expert_weights & e, float weight, int source_expert) {
    if (weight < 0.0f) {
        throw arg_error("decompose: negative importance weight");
    }
    const int h = e.hidden_size();
    std::vector<segment> segs;
    segs.reserve(size_t(h));
    for (int i = 0; i < h; ++i) {
        segment s;
        s.gate_row = e.w_gate.row(i);
        s.up_row = e.w_up.row(i);
        s.down_col = e.w_down.col(i);
        s.weight = weight;
        s.source_expert = source_expert;
        s.source_index = i;
        segs.push_back(std::move(s));
    }
    return segs;
}

expert_weights reassemble(const std::vector<segment> & segs) {
    if (segs.empty()) {
        throw arg_error("reassemble: no segments");
    }
    const int h = int(segs.size());
    const int d = int(segs[0].gate_row.size());
    for (const segment & s : segs) {
        if (int(s.gate_row.size()) != d || int(s.up_row.size()) != d ||
            int(s.down_col.size()) != d) {
            throw dim_error("reassemble: segment dim mismatch");
        }
    }
    expert_weights e;
    e.w_gate = Mat(h, d);
    e.w_up = Mat(h, d);
    e.w_down = Mat(d, h);
    for (int i = 0; i < h; ++i) {
        for (int c = 0; c < d; ++c) {
            e.w_gate.at(i, c) = segs[size_t(i)].gate_row[size_t(c)];
            e.w_up.at(i, c) = segs[size_t(i)].up_row[size_t(c)];
            e.w_down.at(c, i) = segs[size_t(i)].down_col[size_t(c)];
        }
    }
    return e;
}

Vec vectorize(const segment & s, const component_mask & mask) {
    if (mask.active_count() == 0) {
        throw arg_error("vectorize: empty component mask");
    }
    Vec v;
    v.reserve(size_t(mask.active_count()) * s.gate_row.size());
    if (mask.use_gate) {
        v.insert(v.end(), s.gate_row.begin(), s.gate_row.end());
    }
    if (mask.use_up) {
        v.insert(v.end(), s.up_row.begin(), s.up_row.end());
    }
    if (mask.use_down) {
        v.insert(v.end(), s.down_col.begin(), s.down_col.end());
    }
    return v;
}

double sim_to_expert(const segment & s, const std::vector<segment> & targets,
                     const component_mask & mask) {
    if (targets.empty()) {
        throw arg_error("sim_to_expert: empty target segment set");
    }
    const Vec v = vectorize(s, mask);
    double best = -2.0;
    for (const segment & t : targets) {
        best = std::max(best, cosine_d(v, vectorize(t, mask)));
    }
    return best;
}

reassignment_result reassign(const segment_pool & pool,
                             const std::map<int, std::vector<segment>> & retained,
                             double alpha, const component_mask & mask) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw arg_error("reassign: alpha must lie in [0,1]");
    }
    if (retained.empty()) {
        throw arg_error("reassign: no retained experts");
    }
    for (const auto & [id, segs] : retained) {
        if (segs.empty()) {
            throw arg_error("reassign: retained expert " + std::to_string(id) + " has no segments");
        }
    }

    // pre-vectorized targets, frozen for the whole pass
    struct target_set {
        int id;
        std::vector<Vec> vecs;
    };
    std::vector<target_set> targets;
    targets.reserve(retained.size());
    for (const auto & [id, segs] : retained) {
        target_set ts;
        ts.id = id;
        ts.vecs.reserve(segs.size());
        for (const segment & t : segs) {
            ts.vecs.push_back(vectorize(t, mask));
        }
        targets.push_back(std::move(ts));
    }

    reassignment_result result;
    for (const auto & [id, segs] : retained) {
        result.ext_segments[id] = {};
    }
    result.assignments.resize(pool.size());

    const int pool_n = int(pool.size());
    // each pool segment is scored independently; the merge below runs in pool
    // order so the output is identical for any thread count
    #pragma omp parallel for schedule(static)
    for (int i = 0; i < pool_n; ++i) {
        const Vec v = vectorize(pool[size_t(i)], mask);
        double best_sim = -2.0;
        int best_id = -1;
        for (const target_set & ts : targets) {
            double sim = -2.0;
            for (const Vec & tv : ts.vecs) {
                sim = std::max(sim, cosine_d(v, tv));
            }
            if (sim > best_sim) { // strict: earlier (lower) id wins ties
                best_sim = sim;
                best_id = ts.id;
            }
        }
        assignment_record & rec = result.assignments[size_t(i)];
        rec.source_expert = pool[size_t(i)].source_expert;
        rec.source_index = pool[size_t(i)].source_index;
        rec.best_similarity = best_sim;
        rec.target_expert = best_sim > alpha ? best_id : -1;
    }

    size_t assigned = 0;
    for (int i = 0; i < pool_n; ++i) {
        const assignment_record & rec = result.assignments[size_t(i)];
        if (rec.target_expert >= 0) {
            result.ext_segments[rec.target_expert].push_back(pool[size_t(i)]);
            ++assigned;
        }
    }
    result.retained_ratio = pool.empty() ? 0.0 : double(assigned) / double(pool.size());
    return result;
}

router_weights transfer_router_mass(reassignment_result & result,
                                    const router_weights & router,
                                    const std::map<int, int> & pruned_sizes) {
    const int d = router.gate.cols;
    const int n_rows = router.gate.rows;

    for (const auto & [id, segs] : result.ext_segments) {
        if (id < 0 || id >= n_rows) {
            throw arg_error("transfer_router_mass: unknown retained expert id " + std::to_string(id));
        }
    }
    for (const auto & [id, h] : pruned_sizes) {
        if (id < 0 || id >= n_rows || h < 1) {
            throw arg_error("transfer_router_mass: unknown pruned expert id " + std::to_string(id));
        }
    }

    std::map<int, std::vector<double>> delta;
    for (const auto & [id, segs] : result.ext_segments) {
        delta[id] = std::vector<double>(size_t(d), 0.0);
    }

    for (const assignment_record & rec : result.assignments) {
        if (rec.target_expert < 0) {
            continue;
        }
        const auto it = pruned_sizes.find(rec.source_expert);
        if (it == pruned_sizes.end()) {
            throw arg_error("transfer_router_mass: segment from non-pruned expert " +
                            std::to_string(rec.source_expert));
        }
        const double scale = 1.0 / double(it->second);
        const float * src_row = router.gate.row_ptr(rec.source_expert);
        std::vector<double> & dst = delta.at(rec.target_expert);
        for (int t = 0; t < d; ++t) {
            dst[size_t(t)] += scale * double(src_row[t]);
        }
    }

    router_weights out;
    out.gate = Mat(int(result.ext_segments.size()), d);
    result.router_delta.clear();
    int row = 0;
    for (const auto & [id, segs] : result.ext_segments) {
        const float * src_row = router.gate.row_ptr(id);
        const std::vector<double> & dd = delta.at(id);
        Vec delta_f(static_cast<size_t>(d));
        for (int t = 0; t < d; ++t) {
            out.gate.at(row, t) = float(double(src_row[t]) + dd[size_t(t)]);
            delta_f[size_t(t)] = float(dd[size_t(t)]);
        }
        result.router_delta[id] = std::move(delta_f);
        ++row;
    }
    return out;
}

} // namespace dern
