#include "dern/calibration.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dern/rng.hpp"

namespace dern {

routing_stats collect_stats(const moe_model & m, const calibration_set & calib) {
    if (calib.tokens.empty()) {
        throw arg_error("collect_stats: empty calibration set");
    }
    validate_model(m);
    if (!m.layers.empty() && calib.dim() != m.layers[0].input_dim()) {
        throw dim_error("collect_stats: calibration dim " + std::to_string(calib.dim()) +
                        " != model dim " + std::to_string(m.layers[0].input_dim()));
    }

    routing_stats stats;
    stats.token_count = calib.size();
    stats.layers.resize(m.layers.size());

    const int m_tokens = calib.size();
    for (size_t li = 0; li < m.layers.size(); ++li) {
        const moe_layer & layer = m.layers[li];
        layer_stats & ls = stats.layers[li];
        ls.score_accum.assign(size_t(layer.num_experts()), 0.0);
        ls.hit_count.assign(size_t(layer.num_experts()), 0);

        // routing decisions are independent per token; the accumulation below
        // stays in token order so the result matches a sequential pass exactly
        std::vector<routing_decision> decisions(static_cast<size_t>(m_tokens));
        #pragma omp parallel for schedule(static)
        for (int t = 0; t < m_tokens; ++t) {
            decisions[size_t(t)] = route(layer, calib.tokens[size_t(t)]);
        }

        for (int t = 0; t < m_tokens; ++t) {
            const routing_decision & rd = decisions[size_t(t)];
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

std::vector<std::vector<double>> importance_scores(const routing_stats & stats) {
    if (stats.token_count <= 0) {
        throw arg_error("importance_scores: zero tokens");
    }
    std::vector<std::vector<double>> scores;
    scores.reserve(stats.layers.size());
    for (const layer_stats & ls : stats.layers) {
        std::vector<double> s(ls.score_accum.size());
        for (size_t i = 0; i < s.size(); ++i) {
            s[i] = ls.score_accum[i] / double(stats.token_count);
        }
        scores.push_back(std::move(s));
    }
    return scores;
}

std::pair<std::vector<int>, std::vector<int>>
select_retained(const std::vector<double> & scores, int k_retain) {
    const int n = int(scores.size());
    if (k_retain < 1 || k_retain > n) {
        throw arg_error("select_retained: k_retain out of range");
    }
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[size_t(a)] != scores[size_t(b)]) {
            return scores[size_t(a)] > scores[size_t(b)];
        }
        return a < b;
    });
    std::vector<int> retained(order.begin(), order.begin() + k_retain);
    std::vector<int> pruned(order.begin() + k_retain, order.end());
    std::sort(retained.begin(), retained.end());
    std::sort(pruned.begin(), pruned.end());
    return {retained, pruned};
}

calibration_set synth_calibration(int d, int m, uint64_t seed) {
    if (m < 1 || d < 1) {
        throw arg_error("synth_calibration: d and m must be >= 1");
    }
    rng r(seed);
    calibration_set out;
    out.source = "synthetic(seed=" + std::to_string(seed) + ")";
    out.tokens.resize(size_t(m));
    for (int t = 0; t < m; ++t) {
        Vec & v = out.tokens[size_t(t)];
        v.resize(size_t(d));
        for (int i = 0; i < d; ++i) {
            v[size_t(i)] = r.gaussian_f();
        }
    }
    return out;
}

namespace {

constexpr char k_cal_magic[8] = {'D', 'E', 'R', 'N', 'C', 'A', 'L', '1'};

uint64_t get_u64_le(const uint8_t * p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= uint64_t(p[i]) << (8 * i);
    }
    return v;
}

} // namespace

void save_calibration(const calibration_set & c, const std::string & path) {
    if (c.tokens.empty()) {
        throw arg_error("save_calibration: empty set");
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw io_error("cannot open for writing: " + path);
    }
    f.write(k_cal_magic, 8);
    const uint64_t m = uint64_t(c.tokens.size());
    const uint64_t d = uint64_t(c.tokens[0].size());
    char buf[16];
    for (int i = 0; i < 8; ++i) {
        buf[i] = char(uint8_t(m >> (8 * i)));
        buf[8 + i] = char(uint8_t(d >> (8 * i)));
    }
    f.write(buf, 16);
    for (const Vec & v : c.tokens) {
        f.write(reinterpret_cast<const char *>(v.data()), std::streamsize(v.size() * 4));
    }
    if (!f) {
        throw io_error("write failed: " + path);
    }
}

calibration_set load_calibration(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw io_error("cannot open: " + path);
    }
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() < 24 || std::memcmp(raw.data(), k_cal_magic, 8) != 0) {
        throw io_error("malformed calibration file: " + path);
    }
    const uint64_t m = get_u64_le(reinterpret_cast<const uint8_t *>(raw.data()) + 8);
    const uint64_t d = get_u64_le(reinterpret_cast<const uint8_t *>(raw.data()) + 16);
    if (m < 1 || d < 1 || raw.size() != 24 + m * d * 4) {
        throw io_error("truncated calibration file: " + path);
    }
    calibration_set out;
    out.source = path;
    out.tokens.resize(size_t(m));
    const char * p = raw.data() + 24;
    for (uint64_t t = 0; t < m; ++t) {
        out.tokens[size_t(t)].resize(size_t(d));
        std::memcpy(out.tokens[size_t(t)].data(), p, size_t(d) * 4);
        p += d * 4;
    }
    return out;
}

} // namespace dern
