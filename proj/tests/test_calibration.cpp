#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dern/calibration.hpp"
#include "dern/pipeline.hpp"
#include "dern/reference.hpp"
#include "dern/report_io.hpp"
#include "dern/rng.hpp"

using namespace dern;

namespace {

// one layer with an explicit router and dummy experts
moe_layer layer_with_router(const Mat & router, int top_k) {
    moe_layer layer;
    layer.top_k = top_k;
    layer.router.gate = router;
    for (int i = 0; i < router.rows; ++i) {
        expert_weights e;
        e.w_gate = Mat(1, router.cols);
        e.w_up = Mat(1, router.cols);
        e.w_down = Mat(router.cols, 1);
        e.w_gate.at(0, 0) = 1.0f;
        layer.experts.push_back(std::move(e));
    }
    return layer;
}

} // namespace

TEST_CASE("collect_stats with uniform router and top_k = N") {
    Mat router(4, 3); // all-zero rows: identical logits
    moe_model m;
    m.layers = {layer_with_router(router, 4)};

    const calibration_set calib = synth_calibration(3, 40, 5);
    const routing_stats stats = collect_stats(m, calib);
    for (int i = 0; i < 4; ++i) {
        CHECK(stats.layers[0].score_accum[size_t(i)] == doctest::Approx(10.0).epsilon(1e-9));
        CHECK(stats.layers[0].hit_count[size_t(i)] == 40);
    }
}

TEST_CASE("collect_stats renormalizes the active set per token") {
    // logits [ln 3, 0, 0] for x = [1,0]: softmax (0.6, 0.2, 0.2)
    Mat router(3, 2);
    router.at(0, 0) = float(std::log(3.0));
    moe_model m;
    m.layers = {layer_with_router(router, 2)};

    calibration_set calib;
    calib.tokens = {{1.0f, 0.0f}};
    const routing_stats stats = collect_stats(m, calib);
    CHECK(stats.layers[0].score_accum[0] == doctest::Approx(0.75).epsilon(1e-6));
    CHECK(stats.layers[0].score_accum[1] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(stats.layers[0].score_accum[2] == 0.0);
    CHECK(stats.layers[0].hit_count[2] == 0);
}

TEST_CASE("collect_stats mass sums to the token count") {
    rng r(200);
    synth_spec spec;
    spec.d = 6;
    spec.h = 4;
    spec.n_experts = 5;
    spec.top_k = 2;
    spec.layers = 2;
    spec.seed = 31;
    const moe_model m = gen_synthetic_model(spec);
    const calibration_set calib = synth_calibration(6, 201, 8);
    const routing_stats stats = collect_stats(m, calib);
    for (const layer_stats & ls : stats.layers) {
        double total = 0.0;
        for (double v : ls.score_accum) {
            total += v;
        }
        CHECK(total == doctest::Approx(201.0).epsilon(1e-6));
    }
}

TEST_CASE("collect_stats rejects an empty calibration set") {
    Mat router(2, 2);
    moe_model m;
    m.layers = {layer_with_router(router, 1)};
    CHECK_THROWS_AS(collect_stats(m, calibration_set{}), arg_error);
}

TEST_CASE("collect_stats matches the serial reference bit-exactly") {
    synth_spec spec;
    spec.d = 8;
    spec.h = 4;
    spec.n_experts = 6;
    spec.top_k = 3;
    spec.seed = 77;
    const moe_model m = gen_synthetic_model(spec);
    const calibration_set calib = synth_calibration(8, 333, 9);
    const routing_stats a = collect_stats(m, calib);
    const routing_stats b = ref::collect_stats(m, calib);
    REQUIRE(a.layers.size() == b.layers.size());
    CHECK(a.layers[0].score_accum == b.layers[0].score_accum);
    CHECK(a.layers[0].hit_count == b.layers[0].hit_count);
}

TEST_CASE("importance_scores hand-checked two-token case") {
    // token 1: logits [ln 3, 0, 0] for x=[1,0] -> active {0,1} renormalized (0.75, 0.25)
    // token 2: logits [0, ln 4, ln 4] for x=[0,1] -> active {1,2} renormalized (0.5, 0.5)
    Mat router(3, 2);
    router.at(0, 0) = float(std::log(3.0));
    router.at(1, 1) = float(std::log(4.0));
    router.at(2, 1) = float(std::log(4.0));
    moe_model m;
    m.layers = {layer_with_router(router, 2)};

    calibration_set calib;
    calib.tokens = {{1.0f, 0.0f}, {0.0f, 1.0f}};
    const auto scores = importance_scores(collect_stats(m, calib));
    CHECK(scores[0][0] == doctest::Approx(0.375).epsilon(1e-6));
    CHECK(scores[0][1] == doctest::Approx(0.375).epsilon(1e-6));
    CHECK(scores[0][2] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("importance invariants over random models") {
    synth_spec spec;
    spec.d = 5;
    spec.h = 3;
    spec.n_experts = 8;
    spec.top_k = 1;
    spec.seed = 99;
    const moe_model m = gen_synthetic_model(spec);
    const calibration_set calib = synth_calibration(5, 64, 12);
    const routing_stats stats = collect_stats(m, calib);
    const auto scores = importance_scores(stats);

    double total = 0.0;
    for (size_t i = 0; i < scores[0].size(); ++i) {
        total += scores[0][i];
        CHECK((scores[0][i] == 0.0) == (stats.layers[0].hit_count[i] == 0));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

    // doubling the calibration set leaves every score unchanged
    calibration_set twice = calib;
    twice.tokens.insert(twice.tokens.end(), calib.tokens.begin(), calib.tokens.end());
    const auto scores2 = importance_scores(collect_stats(m, twice));
    for (size_t i = 0; i < scores[0].size(); ++i) {
        CHECK(scores2[0][i] == doctest::Approx(scores[0][i]).epsilon(1e-6));
    }

    routing_stats empty_stats;
    CHECK_THROWS_AS(importance_scores(empty_stats), arg_error);
}

TEST_CASE("select_retained ordering and ties") {
    const std::vector<double> s = {0.375, 0.375, 0.25};
    auto [retained, pruned] = select_retained(s, 2);
    CHECK(retained == std::vector<int>{0, 1});
    CHECK(pruned == std::vector<int>{2});

    auto [r2, p2] = select_retained({0.25, 0.25, 0.25, 0.25}, 2);
    CHECK(r2 == std::vector<int>{0, 1});
    CHECK(p2 == std::vector<int>{2, 3});

    auto [r3, p3] = select_retained(s, 3);
    CHECK(r3 == std::vector<int>{0, 1, 2});
    CHECK(p3.empty());

    CHECK_THROWS_AS(select_retained(s, 0), arg_error);
    CHECK_THROWS_AS(select_retained(s, 4), arg_error);

    // invariant under positive rescaling
    std::vector<double> scaled = s;
    for (double & v : scaled) {
        v *= 17.5;
    }
    auto [r4, p4] = select_retained(scaled, 2);
    CHECK(r4 == retained);
    CHECK(p4 == pruned);
}

TEST_CASE("synth_calibration is seeded-deterministic") {
    const calibration_set a = synth_calibration(4, 32, 123);
    const calibration_set b = synth_calibration(4, 32, 123);
    const calibration_set c = synth_calibration(4, 32, 124);
    CHECK(a.tokens == b.tokens);
    CHECK(a.tokens != c.tokens);
    CHECK_THROWS_AS(synth_calibration(4, 0, 1), arg_error);
}

TEST_CASE("synth_calibration per-coordinate mean is near zero") {
    const calibration_set s = synth_calibration(4, 10000, 2024);
    for (int c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (const Vec & t : s.tokens) {
            mean += double(t[size_t(c)]);
        }
        mean /= double(s.tokens.size());
        CHECK(std::fabs(mean) <= 0.05);
    }
}

TEST_CASE("calibration file round-trip and error paths") {
    const calibration_set s = synth_calibration(6, 17, 55);
    const std::string path = "dern_test_calib.cal";
    save_calibration(s, path);
    const calibration_set loaded = load_calibration(path);
    CHECK(loaded.tokens == s.tokens);

    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "DERNCAL1" << std::string(10, '\0'); // header cut short
    }
    CHECK_THROWS_AS(load_calibration(path), io_error);
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "WRONGMAG" << std::string(16, '\0');
    }
    CHECK_THROWS_AS(load_calibration(path), io_error);
    std::remove(path.c_str());
}

TEST_CASE("stats json round-trip keeps 9 significant digits") {
    synth_spec spec;
    spec.d = 4;
    spec.h = 2;
    spec.n_experts = 3;
    spec.top_k = 2;
    spec.seed = 3;
    const moe_model m = gen_synthetic_model(spec);
    const routing_stats stats = collect_stats(m, synth_calibration(4, 50, 6));
    const auto scores = importance_scores(stats);

    const std::string path = "dern_test_stats.json";
    write_stats_json(stats, path);
    const auto loaded = load_stats_scores(path);
    REQUIRE(loaded.size() == 1);
    for (size_t i = 0; i < scores[0].size(); ++i) {
        CHECK(loaded[0][i] == round_sig9(scores[0][i]));
    }
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_stats_scores("does_not_exist.json"), io_error);
}
