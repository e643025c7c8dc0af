// Timing comparison between the OpenMP kernels and the serial reference
// implementations, with an equality check on every output.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dern/calibration.hpp"
#include "dern/pipeline.hpp"
#include "dern/reference.hpp"
#include "dern/rng.hpp"

using clock_type = std::chrono::steady_clock;

static double time_ms(const std::function<void()> & fn, int reps) {
    fn(); // warm up
    const auto t0 = clock_type::now();
    for (int i = 0; i < reps; ++i) {
        fn();
    }
    const auto t1 = clock_type::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

static void report(const char * name, double serial_ms, double parallel_ms, bool match) {
    std::printf("%-22s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   match %s\n", name,
                serial_ms, parallel_ms, serial_ms / parallel_ms, match ? "yes" : "NO");
}

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP; comparing identical serial paths\n\n");
#endif

    dern::rng r(7);

    // matvec: 2048 x 2048
    {
        dern::Mat m(2048, 2048);
        for (float & v : m.data) v = r.gaussian_f();
        dern::Vec x(2048);
        for (float & v : x) v = r.gaussian_f();

        dern::Vec ys, yp;
        const double ts = time_ms([&] { ys = dern::ref::matvec(m, x); }, 20);
        const double tp = time_ms([&] { yp = dern::matvec(m, x); }, 20);
        report("matvec 2048x2048", ts, tp, ys == yp);
    }

    // segment reassignment: 512-segment pool against 4 retained experts
    {
        dern::synth_spec spec;
        spec.d = 64;
        spec.h = 128;
        spec.n_experts = 8;
        spec.top_k = 2;
        spec.seed = 11;
        const dern::moe_model model = dern::gen_synthetic_model(spec);
        const dern::moe_layer & layer = model.layers[0];

        std::map<int, std::vector<dern::segment>> retained;
        dern::segment_pool pool;
        for (int e = 0; e < 4; ++e) {
            retained[e] = dern::decompose(layer.experts[size_t(e)], 0.25f, e);
        }
        for (int e = 4; e < 8; ++e) {
            auto segs = dern::decompose(layer.experts[size_t(e)], 0.25f, e);
            pool.insert(pool.end(), segs.begin(), segs.end());
        }
        const dern::component_mask mask = dern::default_mask();

        dern::reassignment_result rs, rp;
        const double ts = time_ms([&] { rs = dern::ref::reassign(pool, retained, 0.3, mask); }, 5);
        const double tp = time_ms([&] { rp = dern::reassign(pool, retained, 0.3, mask); }, 5);
        bool match = rs.retained_ratio == rp.retained_ratio &&
                     rs.assignments.size() == rp.assignments.size();
        for (size_t i = 0; match && i < rs.assignments.size(); ++i) {
            match = rs.assignments[i].target_expert == rp.assignments[i].target_expert &&
                    rs.assignments[i].best_similarity == rp.assignments[i].best_similarity;
        }
        report("reassign 512 segs", ts, tp, match);
    }

    // routing statistics: 4096 tokens through an 8-expert layer
    {
        dern::synth_spec spec;
        spec.d = 64;
        spec.h = 32;
        spec.n_experts = 8;
        spec.top_k = 2;
        spec.seed = 13;
        const dern::moe_model model = dern::gen_synthetic_model(spec);
        const dern::calibration_set calib = dern::synth_calibration(64, 4096, 17);

        dern::routing_stats ss, sp;
        const double ts = time_ms([&] { ss = dern::ref::collect_stats(model, calib); }, 5);
        const double tp = time_ms([&] { sp = dern::collect_stats(model, calib); }, 5);
        bool match = ss.token_count == sp.token_count;
        for (size_t li = 0; match && li < ss.layers.size(); ++li) {
            match = ss.layers[li].score_accum == sp.layers[li].score_accum &&
                    ss.layers[li].hit_count == sp.layers[li].hit_count;
        }
        report("collect_stats 4096", ts, tp, match);
    }

    return 0;
}
