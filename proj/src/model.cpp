#include "dern/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace dern {

float silu(float z) {
    const double zd = double(z);
    return float(zd / (1.0 + std::exp(-zd)));
}

static void check_expert_shapes(const expert_weights & e) {
    const int h = e.w_gate.rows;
    const int d = e.w_gate.cols;
    if (h < 1 || d < 1) {
        throw dim_error("expert: h and d must be >= 1");
    }
    if (e.w_up.rows != h || e.w_up.cols != d || e.w_down.rows != d || e.w_down.cols != h) {
        throw dim_error("expert: inconsistent gate/up/down shapes");
    }
}

Vec expert_forward(const expert_weights & e, const Vec & x) {
    check_expert_shapes(e);
    if (x.size() != size_t(e.input_dim())) {
        throw dim_error("expert_forward: input length mismatch");
    }
    const int h = e.hidden_size();
    const int d = e.input_dim();
    const bool big = size_t(h) * size_t(d) > 16384;

    // per-neuron activations stay in double; only the output rounds to f32,
    // so this agrees bit-for-bit with the per-segment sum form
    std::vector<double> hidden(static_cast<size_t>(h));
    auto activate = [&](int i) {
        const double g = dot_d(e.w_gate.row_ptr(i), x.data(), size_t(d));
        const double u = dot_d(e.w_up.row_ptr(i), x.data(), size_t(d));
        hidden[size_t(i)] = g / (1.0 + std::exp(-g)) * u;
    };
    Vec out(static_cast<size_t>(d));
    auto project = [&](int t) {
        const float * row = e.w_down.row_ptr(t);
        double acc = 0.0;
        for (int i = 0; i < h; ++i) {
            acc += double(row[i]) * hidden[size_t(i)];
        }
        out[size_t(t)] = float(acc);
    };
    // small experts skip the OpenMP runtime; this runs inside parallel
    // per-token and per-probe loops
    if (big) {
        #pragma omp parallel for schedule(static)
        for (int i = 0; i < h; ++i) {
            activate(i);
        }
        #pragma omp parallel for schedule(static)
        for (int t = 0; t < d; ++t) {
            project(t);
        }
    } else {
        for (int i = 0; i < h; ++i) {
            activate(i);
        }
        for (int t = 0; t < d; ++t) {
            project(t);
        }
    }
    return out;
}

routing_decision route(const moe_layer & layer, const Vec & x) {
    const int n = layer.num_experts();
    if (n < 1) {
        throw dim_error("route: layer has no experts");
    }
    if (x.size() != size_t(layer.router.gate.cols)) {
        throw dim_error("route: input length mismatch");
    }
    if (layer.top_k < 1 || layer.top_k > n) {
        throw arg_error("route: top_k out of range");
    }

    const Vec logits = matvec(layer.router.gate, x);

    // softmax over all N, in double, max-shifted
    double max_logit = double(logits[0]);
    for (int i = 1; i < n; ++i) {
        max_logit = std::max(max_logit, double(logits[i]));
    }
    std::vector<double> w(static_cast<size_t>(n));
    double denom = 0.0;
    for (int i = 0; i < n; ++i) {
        w[size_t(i)] = std::exp(double(logits[size_t(i)]) - max_logit);
        denom += w[size_t(i)];
    }
    for (int i = 0; i < n; ++i) {
        w[size_t(i)] /= denom;
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
    rd.indices.assign(order.begin(), order.begin() + layer.top_k);
    rd.weights.reserve(size_t(layer.top_k));
    for (int id : rd.indices) {
        rd.weights.push_back(w[size_t(id)]);
    }
    return rd;
}

Vec layer_forward(const moe_layer & layer, const Vec & x) {
    const routing_decision rd = route(layer, x);
    double active_sum = 0.0;
    for (double w : rd.weights) {
        active_sum += w;
    }

    const int d = layer.input_dim();
    std::vector<double> acc(size_t(d), 0.0);
    for (size_t s = 0; s < rd.indices.size(); ++s) {
        const double w = rd.weights[s] / active_sum;
        const Vec y = expert_forward(layer.experts[size_t(rd.indices[s])], x);
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

uint64_t param_count(const moe_model & m) {
    uint64_t total = 0;
    for (const moe_layer & layer : m.layers) {
        total += uint64_t(layer.router.gate.data.size());
        for (const expert_weights & e : layer.experts) {
            total += uint64_t(e.w_gate.data.size());
            total += uint64_t(e.w_up.data.size());
            total += uint64_t(e.w_down.data.size());
        }
    }
    return total;
}

void validate_model(const moe_model & m) {
    int model_d = -1;
    for (size_t li = 0; li < m.layers.size(); ++li) {
        const moe_layer & layer = m.layers[li];
        const int n = layer.num_experts();
        if (n < 1) {
            throw dim_error("layer " + std::to_string(li) + ": no experts");
        }
        if (layer.top_k < 1 || layer.top_k > n) {
            throw dim_error("layer " + std::to_string(li) + ": top_k out of range");
        }
        const int d = layer.router.gate.cols;
        if (layer.router.gate.rows != n) {
            throw dim_error("layer " + std::to_string(li) + ": router rows != expert count");
        }
        if (model_d == -1) {
            model_d = d;
        } else if (model_d != d) {
            throw dim_error("layer " + std::to_string(li) + ": input dim differs across layers");
        }
        for (int j = 0; j < n; ++j) {
            const expert_weights & e = layer.experts[size_t(j)];
            check_expert_shapes(e);
            if (e.input_dim() != d) {
                throw dim_error("layer " + std::to_string(li) + " expert " + std::to_string(j) +
                                ": input dim != router dim");
            }
        }
    }
}

bool has_non_finite(const moe_model & m) {
    for (const moe_layer & layer : m.layers) {
        if (!all_finite(layer.router.gate)) {
            return true;
        }
        for (const expert_weights & e : layer.experts) {
            if (!all_finite(e.w_gate) || !all_finite(e.w_up) || !all_finite(e.w_down)) {
                return true;
            }
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// .dmoe container

namespace {

constexpr char k_magic[8] = {'D', 'E', 'R', 'N', 'M', 'O', 'E', '1'};
constexpr uint64_t k_align = 64;

uint64_t align_up(uint64_t v) {
    return (v + k_align - 1) / k_align * k_align;
}

void put_u64_le(std::string & out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(char(uint8_t(v >> (8 * i))));
    }
}

uint64_t get_u64_le(const uint8_t * p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= uint64_t(p[i]) << (8 * i);
    }
    return v;
}

struct tensor_entry {
    std::string name;
    const Mat * mat;
    uint64_t offset;
};

void append_f32_le(std::string & out, const std::vector<float> & data) {
    // payload floats are little-endian; matches every platform this builds on
    static_assert(sizeof(float) == 4);
    const size_t base = out.size();
    out.resize(base + data.size() * 4);
    std::memcpy(out.data() + base, data.data(), data.size() * 4);
}

} // namespace

void save_model(const moe_model & m, const std::string & path) {
    validate_model(m);

    std::vector<tensor_entry> tensors;
    uint64_t offset = 0;
    auto add = [&](std::string name, const Mat & mat) {
        offset = align_up(offset);
        tensors.push_back({std::move(name), &mat, offset});
        offset += uint64_t(mat.data.size()) * 4;
    };
    for (size_t li = 0; li < m.layers.size(); ++li) {
        const moe_layer & layer = m.layers[li];
        const std::string prefix = "layers." + std::to_string(li) + ".";
        add(prefix + "router", layer.router.gate);
        for (size_t j = 0; j < layer.experts.size(); ++j) {
            const std::string eprefix = prefix + "experts." + std::to_string(j) + ".";
            add(eprefix + "gate", layer.experts[j].w_gate);
            add(eprefix + "up", layer.experts[j].w_up);
            add(eprefix + "down", layer.experts[j].w_down);
        }
    }

    nlohmann::ordered_json header;
    header["meta"] = {{"name", m.name}, {"version", m.version}};
    header["tensors"] = nlohmann::ordered_json::array();
    for (const tensor_entry & t : tensors) {
        header["tensors"].push_back({
            {"name", t.name},
            {"shape", {t.mat->rows, t.mat->cols}},
            {"offset", t.offset},
            {"dtype", "f32"},
        });
    }
    header["top_k"] = nlohmann::ordered_json::array();
    for (const moe_layer & layer : m.layers) {
        header["top_k"].push_back(layer.top_k);
    }

    const std::string header_str = header.dump();

    std::string out;
    out.append(k_magic, sizeof(k_magic));
    put_u64_le(out, uint64_t(header_str.size()));
    out.append(header_str);

    std::string payload;
    for (const tensor_entry & t : tensors) {
        payload.resize(size_t(t.offset), '\0');
        append_f32_le(payload, t.mat->data);
    }
    out.append(payload);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw io_error("cannot open for writing: " + path);
    }
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) {
        throw io_error("write failed: " + path);
    }
}

namespace {

struct parsed_tensor {
    int rows = 0;
    int cols = 0;
    uint64_t offset = 0;
    bool seen = false;
};

Mat read_tensor(const std::string & payload, const parsed_tensor & t, const std::string & name) {
    const uint64_t bytes = uint64_t(t.rows) * uint64_t(t.cols) * 4;
    if (t.offset + bytes > payload.size()) {
        throw io_error("truncated payload for tensor " + name);
    }
    Mat m(t.rows, t.cols);
    std::memcpy(m.data.data(), payload.data() + t.offset, size_t(bytes));
    return m;
}

} // namespace

moe_model load_model(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw io_error("cannot open: " + path);
    }
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (raw.size() < 16) {
        throw io_error("malformed header: file too short");
    }
    if (std::memcmp(raw.data(), "DERNMOE", 7) != 0) {
        throw io_error("malformed header: bad magic");
    }
    if (raw[7] != '1') {
        throw io_error("unsupported format version: " + raw.substr(0, 8));
    }
    const uint64_t header_len = get_u64_le(reinterpret_cast<const uint8_t *>(raw.data()) + 8);
    if (16 + header_len > raw.size()) {
        throw io_error("malformed header: stated length exceeds file size");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(raw.substr(16, size_t(header_len)));
    } catch (const nlohmann::json::exception & e) {
        throw io_error(std::string("malformed header: ") + e.what());
    }
    // unknown top-level keys are ignored for forward compatibility
    if (!header.contains("tensors") || !header["tensors"].is_array() ||
        !header.contains("top_k") || !header["top_k"].is_array()) {
        throw io_error("malformed header: missing tensors/top_k");
    }

    const std::string payload = raw.substr(16 + size_t(header_len));

    // name -> parsed tensor, grouped by (layer, kind, expert)
    std::vector<parsed_tensor> routers;
    std::vector<std::vector<std::array<parsed_tensor, 3>>> experts; // [layer][expert][gate,up,down]

    auto ensure_layer = [&](size_t li) {
        if (routers.size() <= li) {
            routers.resize(li + 1);
            experts.resize(li + 1);
        }
    };

    for (const auto & jt : header["tensors"]) {
        if (!jt.contains("name") || !jt.contains("shape") || !jt.contains("offset") ||
            !jt.contains("dtype")) {
            throw io_error("malformed header: tensor entry missing fields");
        }
        if (jt["dtype"].get<std::string>() != "f32") {
            throw io_error("unsupported dtype: " + jt["dtype"].get<std::string>());
        }
        const auto & shape = jt["shape"];
        if (!shape.is_array() || shape.size() != 2) {
            throw io_error("malformed header: tensor shape must be [rows, cols]");
        }
        parsed_tensor t;
        t.rows = shape[0].get<int>();
        t.cols = shape[1].get<int>();
        t.offset = jt["offset"].get<uint64_t>();
        t.seen = true;
        if (t.rows < 1 || t.cols < 1) {
            throw io_error("malformed header: non-positive tensor shape");
        }

        const std::string name = jt["name"].get<std::string>();
        unsigned li = 0, ei = 0;
        char kind[8] = {0};
        if (std::sscanf(name.c_str(), "layers.%u.experts.%u.%7s", &li, &ei, kind) == 3) {
            ensure_layer(li);
            if (experts[li].size() <= ei) {
                experts[li].resize(ei + 1);
            }
            int slot = -1;
            if (std::string(kind) == "gate") slot = 0;
            else if (std::string(kind) == "up") slot = 1;
            else if (std::string(kind) == "down") slot = 2;
            else throw io_error("unexpected tensor name: " + name);
            if (experts[li][ei][size_t(slot)].seen) {
                throw io_error("duplicate tensor: " + name);
            }
            experts[li][ei][size_t(slot)] = t;
        } else if (std::sscanf(name.c_str(), "layers.%u.router", &li) == 1 &&
                   name == "layers." + std::to_string(li) + ".router") {
            ensure_layer(li);
            if (routers[li].seen) {
                throw io_error("duplicate tensor: " + name);
            }
            routers[li] = t;
        } else {
            throw io_error("unexpected tensor name: " + name);
        }
    }

    if (header["top_k"].size() != routers.size()) {
        throw io_error("shape mismatch: top_k entries != layer count");
    }

    moe_model m;
    if (header.contains("meta") && header["meta"].is_object()) {
        const auto & meta = header["meta"];
        if (meta.contains("name")) m.name = meta["name"].get<std::string>();
        if (meta.contains("version")) m.version = meta["version"].get<std::string>();
    }

    for (size_t li = 0; li < routers.size(); ++li) {
        if (!routers[li].seen) {
            throw io_error("shape mismatch: layer " + std::to_string(li) + " missing router");
        }
        moe_layer layer;
        layer.router.gate = read_tensor(payload, routers[li], "layers." + std::to_string(li) + ".router");
        const size_t n = experts[li].size();
        if (size_t(layer.router.gate.rows) != n) {
            throw io_error("shape mismatch: router rows != expert tensor count in layer " +
                           std::to_string(li));
        }
        for (size_t j = 0; j < n; ++j) {
            for (int s = 0; s < 3; ++s) {
                if (!experts[li][j][size_t(s)].seen) {
                    throw io_error("shape mismatch: layer " + std::to_string(li) + " expert " +
                                   std::to_string(j) + " missing tensor");
                }
            }
            expert_weights e;
            e.w_gate = read_tensor(payload, experts[li][j][0], "gate");
            e.w_up = read_tensor(payload, experts[li][j][1], "up");
            e.w_down = read_tensor(payload, experts[li][j][2], "down");
            layer.experts.push_back(std::move(e));
        }
        layer.top_k = header["top_k"][li].get<int>();
        m.layers.push_back(std::move(layer));
    }

    try {
        validate_model(m);
    } catch (const dim_error & e) {
        throw io_error(std::string("shape mismatch: ") + e.what());
    }
    return m;
}

} // namespace dern
