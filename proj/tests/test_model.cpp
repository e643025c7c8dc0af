#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "dern/model.hpp"
#include "dern/pipeline.hpp"
#include "dern/reference.hpp"
#include "dern/rng.hpp"

using namespace dern;

namespace {

expert_weights random_expert(rng & r, int h, int d) {
    expert_weights e;
    e.w_gate = Mat(h, d);
    e.w_up = Mat(h, d);
    e.w_down = Mat(d, h);
    for (float * p : {e.w_gate.data.data(), e.w_up.data.data()}) {
        for (int i = 0; i < h * d; ++i) {
            p[i] = r.gaussian_f();
        }
    }
    for (float & v : e.w_down.data) {
        v = r.gaussian_f();
    }
    return e;
}

moe_layer random_layer(rng & r, int n, int h, int d, int top_k) {
    moe_layer layer;
    layer.top_k = top_k;
    for (int i = 0; i < n; ++i) {
        layer.experts.push_back(random_expert(r, h, d));
    }
    layer.router.gate = Mat(n, d);
    for (float & v : layer.router.gate.data) {
        v = r.gaussian_f();
    }
    return layer;
}

Vec random_vec(rng & r, int n) {
    Vec v(static_cast<size_t>(n));
    for (float & x : v) {
        x = r.gaussian_f();
    }
    return v;
}

std::string temp_path(const char * name) {
    return std::string("dern_test_") + name;
}

} // namespace

TEST_CASE("silu values") {
    CHECK(silu(0.0f) == 0.0f);
    CHECK(double(silu(1.0f)) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-7));
    CHECK(double(silu(30.0f)) == doctest::Approx(30.0).epsilon(1e-7));
    CHECK(std::fabs(double(silu(-30.0f))) < 1e-11);
}

TEST_CASE("expert_forward on zero weights gives zero") {
    expert_weights e;
    e.w_gate = Mat(3, 2);
    e.w_up = Mat(3, 2);
    e.w_down = Mat(2, 3);
    CHECK(expert_forward(e, {1.5f, -2.0f}) == Vec(2, 0.0f));
}

TEST_CASE("expert_forward hand-checked scalar chain, d=2 h=1") {
    expert_weights e;
    e.w_gate = Mat(1, 2);
    e.w_gate.at(0, 0) = 3.0f;
    e.w_gate.at(0, 1) = 4.0f;
    e.w_up = Mat(1, 2);
    e.w_up.at(0, 0) = 0.5f;
    e.w_up.at(0, 1) = 0.25f;
    e.w_down = Mat(2, 1);
    e.w_down.at(0, 0) = 2.0f;
    e.w_down.at(1, 0) = -1.0f;

    const Vec x = {1.0f, 2.0f};
    const double g = 3.0 * 1.0 + 4.0 * 2.0; // 11
    const double u = 0.5 * 1.0 + 0.25 * 2.0; // 1
    const double act = g / (1.0 + std::exp(-g)) * u;

    const Vec y = expert_forward(e, x);
    CHECK(double(y[0]) == doctest::Approx(2.0 * act).epsilon(1e-6));
    CHECK(double(y[1]) == doctest::Approx(-1.0 * act).epsilon(1e-6));
    CHECK_THROWS_AS(expert_forward(e, {1.0f}), dim_error);
}

TEST_CASE("expert_forward equals segment-sum form") {
    rng r(101);
    for (int rep = 0; rep < 20; ++rep) {
        const expert_weights e = random_expert(r, 16, 8);
        const Vec x = random_vec(r, 8);
        const Vec fast = expert_forward(e, x);
        const Vec slow = ref::expert_forward_segment_sum(e, x);
        for (size_t t = 0; t < fast.size(); ++t) {
            CHECK(double(fast[t]) == doctest::Approx(double(slow[t]))
                                         .epsilon(1e-5)
                                         .scale(1.0 + std::fabs(double(slow[t]))));
        }
    }
}

TEST_CASE("route picks the dominant expert") {
    moe_layer layer;
    layer.top_k = 1;
    layer.router.gate = Mat(2, 2);
    layer.router.gate.at(0, 0) = 1.0f;
    layer.router.gate.at(1, 1) = 1.0f;
    rng r(102);
    layer.experts = {random_expert(r, 2, 2), random_expert(r, 2, 2)};

    const routing_decision rd = route(layer, {10.0f, 0.0f});
    CHECK(rd.indices == std::vector<int>{0});
    CHECK(rd.weights[0] == doctest::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-9));
}

TEST_CASE("route breaks symmetric ties toward lower ids") {
    rng r(103);
    moe_layer layer = random_layer(r, 4, 2, 3, 2);
    // identical rows -> identical logits for every input
    for (int i = 1; i < 4; ++i) {
        for (int c = 0; c < 3; ++c) {
            layer.router.gate.at(i, c) = layer.router.gate.at(0, c);
        }
    }
    const routing_decision rd = route(layer, {0.3f, -1.2f, 0.8f});
    CHECK(rd.indices == std::vector<int>{0, 1});
    CHECK(rd.weights[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(rd.weights[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("route matches the full-sort oracle") {
    rng r(104);
    for (int rep = 0; rep < 25; ++rep) {
        const moe_layer layer = random_layer(r, 8, 2, 6, 1 + int(r.below(8)));
        const Vec x = random_vec(r, 6);
        const routing_decision a = route(layer, x);
        const routing_decision b = ref::route(layer, x);
        CHECK(a.indices == b.indices);
        CHECK(a.weights == b.weights);
    }
}

TEST_CASE("route returns distinct ids and softmax-subset weights") {
    rng r(105);
    for (int rep = 0; rep < 25; ++rep) {
        const int n = 2 + int(r.below(7));
        const moe_layer layer = random_layer(r, n, 2, 4, 1 + int(r.below(uint64_t(n))));
        Vec x = random_vec(r, 4);
        for (float & v : x) {
            v *= 0.5f;
        }
        const routing_decision rd = route(layer, x);
        CHECK(int(rd.indices.size()) == layer.top_k);
        CHECK(std::set<int>(rd.indices.begin(), rd.indices.end()).size() == rd.indices.size());
        double total = 0.0;
        for (double w : rd.weights) {
            CHECK(w > 0.0);
            CHECK(w < 1.0);
            total += w;
        }
        CHECK(total <= 1.0 + 1e-12);
    }
}

TEST_CASE("layer_forward limit cases") {
    rng r(106);
    // single expert, top_k = 1
    moe_layer single = random_layer(r, 1, 4, 3, 1);
    const Vec x = random_vec(r, 3);
    CHECK(layer_forward(single, x) == expert_forward(single.experts[0], x));

    // two identical experts, top_k = 2: convex mix of equal outputs
    moe_layer twin = random_layer(r, 2, 4, 3, 2);
    twin.experts[1] = twin.experts[0];
    const Vec mixed = layer_forward(twin, x);
    const Vec one = expert_forward(twin.experts[0], x);
    for (size_t t = 0; t < mixed.size(); ++t) {
        CHECK(double(mixed[t]) == doctest::Approx(double(one[t])).epsilon(1e-6));
    }
}

TEST_CASE("layer_forward matches direct transcription and is deterministic") {
    rng r(107);
    for (int rep = 0; rep < 10; ++rep) {
        const moe_layer layer = random_layer(r, 6, 8, 5, 2);
        const Vec x = random_vec(r, 5);
        const Vec a = layer_forward(layer, x);
        const Vec b = ref::layer_forward(layer, x);
        for (size_t t = 0; t < a.size(); ++t) {
            CHECK(double(a[t]) == doctest::Approx(double(b[t]))
                                      .epsilon(1e-5)
                                      .scale(1.0 + std::fabs(double(b[t]))));
        }
        CHECK(layer_forward(layer, x) == a); // bit-identical on repeat
    }
}

TEST_CASE("model save/load round-trips bit-exactly") {
    rng r(108);
    moe_model m;
    m.name = "roundtrip";
    m.version = "7";
    moe_layer l0 = random_layer(r, 3, 4, 5, 2);
    moe_layer l1 = random_layer(r, 2, 4, 5, 1);
    l1.experts[1] = random_expert(r, 9, 5); // per-expert h may differ
    m.layers = {l0, l1};

    const std::string path = temp_path("roundtrip.dmoe");
    save_model(m, path);
    const moe_model loaded = load_model(path);
    CHECK(loaded == m);
    std::remove(path.c_str());
}

TEST_CASE("load rejects an empty file") {
    const std::string path = temp_path("empty.dmoe");
    std::ofstream(path, std::ios::binary).close();
    CHECK_THROWS_AS(load_model(path), io_error);
    std::remove(path.c_str());
}

TEST_CASE("load rejects bad magic and future versions") {
    const std::string path = temp_path("magic.dmoe");
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTADMOE" << std::string(8, '\0');
    }
    CHECK_THROWS_AS(load_model(path), io_error);
    {
        std::ofstream f(path, std::ios::binary);
        f << "DERNMOE9" << std::string(8, '\0');
    }
    CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("unsupported format version"),
                         io_error);
    std::remove(path.c_str());
}

namespace {

std::string raw_file(const std::string & header, size_t payload_bytes) {
    std::string out = "DERNMOE1";
    const uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) {
        out.push_back(char(uint8_t(len >> (8 * i))));
    }
    out += header;
    out += std::string(payload_bytes, '\0');
    return out;
}

void write_raw(const std::string & path, const std::string & bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), std::streamsize(bytes.size()));
}

} // namespace

TEST_CASE("load rejects tensor/router count mismatch") {
    // router says two experts, but only expert 0 has tensors
    const std::string header = R"({"meta":{},"top_k":[1],"tensors":[)"
        R"({"name":"layers.0.router","shape":[2,2],"offset":0,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.gate","shape":[1,2],"offset":64,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.up","shape":[1,2],"offset":128,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.down","shape":[2,1],"offset":192,"dtype":"f32"}]})";
    const std::string path = temp_path("mismatch.dmoe");
    write_raw(path, raw_file(header, 256));
    CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("shape mismatch"), io_error);
    std::remove(path.c_str());
}

TEST_CASE("load rejects truncated payload") {
    const std::string header = R"({"meta":{},"top_k":[1],"tensors":[)"
        R"({"name":"layers.0.router","shape":[1,2],"offset":0,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.gate","shape":[1,2],"offset":64,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.up","shape":[1,2],"offset":128,"dtype":"f32"},)"
        R"({"name":"layers.0.experts.0.down","shape":[2,1],"offset":192,"dtype":"f32"}]})";
    const std::string path = temp_path("truncated.dmoe");
    write_raw(path, raw_file(header, 100)); // down tensor needs bytes up to 200
    CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("truncated"), io_error);
    std::remove(path.c_str());
}

TEST_CASE("load ignores unknown header keys") {
    rng r(109);
    moe_model m;
    m.layers = {random_layer(r, 2, 3, 4, 1)};
    const std::string path = temp_path("forward.dmoe");
    save_model(m, path);

    // splice an extra key into the header
    std::ifstream in(path, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= uint64_t(uint8_t(raw[size_t(8 + i)])) << (8 * i);
    }
    std::string header = raw.substr(16, size_t(len));
    header.insert(1, R"("future_field":[1,2,3],)");
    std::string patched = raw.substr(0, 8);
    const uint64_t new_len = header.size();
    for (int i = 0; i < 8; ++i) {
        patched.push_back(char(uint8_t(new_len >> (8 * i))));
    }
    patched += header;
    patched += raw.substr(16 + size_t(len));
    write_raw(path, patched);

    CHECK(load_model(path) == m);
    std::remove(path.c_str());
}

TEST_CASE("param_count") {
    rng r(110);
    moe_layer layer = random_layer(r, 2, 3, 2, 1);
    moe_model m;
    m.layers = {layer};
    // router 2*2 + 2 experts * (3*2 + 3*2 + 2*3) = 4 + 36
    CHECK(param_count(m) == 40);

    CHECK(param_count(moe_model{}) == 0);

    moe_model m8, m4;
    m8.layers = {random_layer(r, 8, 3, 2, 1)};
    m4.layers = {random_layer(r, 4, 3, 2, 1)};
    const uint64_t expert8 = param_count(m8) - 8 * 2;
    const uint64_t expert4 = param_count(m4) - 4 * 2;
    CHECK(expert8 == 2 * expert4);
}

TEST_CASE("validate_model rejects inconsistent shapes") {
    rng r(111);
    moe_model m;
    m.layers = {random_layer(r, 2, 3, 4, 1), random_layer(r, 2, 3, 5, 1)};
    CHECK_THROWS_AS(validate_model(m), dim_error); // d differs across layers

    moe_model m2;
    m2.layers = {random_layer(r, 2, 3, 4, 3)};
    CHECK_THROWS_AS(validate_model(m2), dim_error); // top_k > N
}
