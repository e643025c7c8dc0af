#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dern/pipeline.hpp"
#include "dern/report_io.hpp"
#include "dern/rng.hpp"

namespace {

dern::component_mask parse_mask(const std::string & s) {
    dern::component_mask mask{false, false, false};
    size_t start = 0;
    while (start <= s.size()) {
        const size_t end = std::min(s.find(',', start), s.size());
        const std::string tok = s.substr(start, end - start);
        if (tok == "gate") mask.use_gate = true;
        else if (tok == "up") mask.use_up = true;
        else if (tok == "down") mask.use_down = true;
        else throw dern::arg_error("unknown mask component: '" + tok + "'");
        start = end + 1;
    }
    return mask;
}

dern::cluster_init parse_init(const std::string & s) {
    if (s == "gate" || s == "gate_based") return dern::cluster_init::gate_based;
    if (s == "random") return dern::cluster_init::random_choice;
    if (s == "equidistant") return dern::cluster_init::equidistant;
    throw dern::arg_error("unknown init strategy: '" + s + "'");
}

std::vector<int> parse_int_list(const std::string & s) {
    std::vector<int> out;
    size_t start = 0;
    while (start <= s.size()) {
        const size_t end = std::min(s.find(',', start), s.size());
        const std::string tok = s.substr(start, end - start);
        try {
            size_t used = 0;
            out.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception &) {
            throw dern::arg_error("bad integer '" + tok + "' in list");
        }
        start = end + 1;
    }
    return out;
}

// "0,1|2,3" lists explicit groups; "KxM" is K groups of M consecutive ids
std::vector<std::vector<int>> parse_groups(const std::string & s, int n_experts) {
    std::vector<std::vector<int>> groups;
    if (s.empty()) {
        return groups;
    }
    int k = 0, m = 0;
    char trailing = 0;
    if (std::sscanf(s.c_str(), "%dx%d%c", &k, &m, &trailing) == 2) {
        if (k < 1 || m < 1 || k * m != n_experts) {
            throw dern::arg_error("groups '" + s + "' do not cover " +
                                  std::to_string(n_experts) + " experts");
        }
        for (int g = 0; g < k; ++g) {
            std::vector<int> ids;
            for (int i = 0; i < m; ++i) {
                ids.push_back(g * m + i);
            }
            groups.push_back(std::move(ids));
        }
        return groups;
    }
    size_t start = 0;
    while (start <= s.size()) {
        const size_t end = std::min(s.find('|', start), s.size());
        groups.push_back(parse_int_list(s.substr(start, end - start)));
        start = end + 1;
    }
    return groups;
}

void apply_cluster_config_file(const std::string & path, dern::compress_params & params) {
    std::ifstream f(path);
    if (!f) {
        throw dern::io_error("cannot open config: " + path);
    }
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception & e) {
        throw dern::io_error("malformed config " + path + ": " + e.what());
    }
    if (j.contains("max_iters")) params.max_iters = j["max_iters"].get<int>();
    if (j.contains("tol")) params.tol = j["tol"].get<double>();
    if (j.contains("init")) params.init = parse_init(j["init"].get<std::string>());
    if (j.contains("use_weights")) params.use_weights = j["use_weights"].get<bool>();
    if (j.contains("mask")) params.mask = parse_mask(j["mask"].get<std::string>());
    if (j.contains("seed")) params.seed = j["seed"].get<uint64_t>();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// report probes are fixed; the eval subcommand exposes a configurable count
constexpr int k_report_probes = 256;

struct gen_args {
    int d = 8, h = 16, experts = 4, top_k = 2, layers = 1;
    std::string groups;
    double noise = 0.0;
    uint64_t seed = 0;
    std::string out;
};

struct calibrate_args {
    std::string model;
    int synth_tokens = 0;
    std::string calib;
    uint64_t seed = 0;
    std::string out;
};

struct compress_args {
    std::string model, stats;
    int retain = 1;
    std::string retain_per_layer;
    double alpha = 0.5, ratio = 1.0;
    std::string mask = "up,down";
    std::string init = "gate";
    std::string weighting = "on";
    std::string baseline = "dern";
    uint64_t seed = 0;
    std::string out, report, dump_assignments, dump_clusters, config;
};

struct eval_args {
    std::string original, compressed;
    int probes = 256;
    uint64_t seed = 0;
    std::string out;
};

struct sim_args {
    std::string model;
    int layer = 0;
    std::string out_expert, out_neuron;
};

void run_gen(const gen_args & a) {
    dern::synth_spec spec;
    spec.d = a.d;
    spec.h = a.h;
    spec.n_experts = a.experts;
    spec.top_k = a.top_k;
    spec.layers = a.layers;
    spec.groups = parse_groups(a.groups, a.experts);
    spec.noise_sigma = a.noise;
    spec.seed = a.seed;
    const dern::moe_model m = dern::gen_synthetic_model(spec);
    if (dern::has_non_finite(m)) {
        throw dern::numeric_error("NaN detected in generated model");
    }
    dern::save_model(m, a.out);
    std::printf("wrote %s: %d layer(s), %d experts, d=%d h=%d, %llu params\n", a.out.c_str(),
                a.layers, a.experts, a.d, a.h, (unsigned long long) dern::param_count(m));
}

void run_calibrate(const calibrate_args & a) {
    if ((a.synth_tokens > 0) == !a.calib.empty()) {
        throw dern::arg_error("calibrate: pass exactly one of --synth-tokens or --calib");
    }
    const dern::moe_model m = dern::load_model(a.model);
    if (m.layers.empty()) {
        throw dern::arg_error("calibrate: model has no layers");
    }
    dern::calibration_set calib;
    if (a.synth_tokens > 0) {
        calib = dern::synth_calibration(m.layers[0].input_dim(), a.synth_tokens,
                                        dern::calibration_seed(a.seed));
    } else {
        calib = dern::load_calibration(a.calib);
    }
    const dern::routing_stats stats = dern::collect_stats(m, calib);
    dern::write_stats_json(stats, a.out);
    std::printf("wrote %s: %lld tokens over %zu layer(s)\n", a.out.c_str(),
                (long long) stats.token_count, stats.layers.size());
}

void run_compress(const compress_args & a) {
    const auto t0 = std::chrono::steady_clock::now();

    dern::compress_params params;
    if (!a.config.empty()) {
        apply_cluster_config_file(a.config, params);
    }
    params.k_retain = a.retain;
    if (!a.retain_per_layer.empty()) {
        params.k_retain_per_layer = parse_int_list(a.retain_per_layer);
    }
    params.alpha = a.alpha;
    params.ratio = a.ratio;
    params.mask = parse_mask(a.mask);
    params.init = parse_init(a.init);
    if (a.weighting == "on") params.use_weights = true;
    else if (a.weighting == "off") params.use_weights = false;
    else throw dern::arg_error("--weighting must be on or off");
    if (a.baseline == "dern") params.baseline = dern::baseline_kind::dern;
    else if (a.baseline == "prune") params.baseline = dern::baseline_kind::prune_only;
    else if (a.baseline == "average") params.baseline = dern::baseline_kind::expert_average;
    else throw dern::arg_error("--baseline must be dern, prune or average");
    params.seed = a.seed;

    const dern::moe_model m = dern::load_model(a.model);
    const auto scores = dern::load_stats_scores(a.stats);
    const dern::compress_result result = dern::compress_model(m, scores, params);
    if (dern::has_non_finite(result.model)) {
        throw dern::numeric_error("NaN detected in compressed model");
    }
    dern::save_model(result.model, a.out);

    if (!a.report.empty()) {
        dern::eval_report eval =
            dern::evaluate_models(m, result.model, k_report_probes, params.seed);
        if (!std::isfinite(eval.mse) || !std::isfinite(eval.cosine)) {
            throw dern::numeric_error("NaN detected in evaluation metrics");
        }
        eval.seconds = seconds_since(t0);
        dern::write_compress_report_json(result, eval, params, a.report);
    }
    if (!a.dump_assignments.empty()) {
        dern::write_assignments_csv(result, a.dump_assignments);
    }
    if (!a.dump_clusters.empty()) {
        dern::write_clusters_csv(result, a.dump_clusters);
    }
    std::printf("wrote %s: %llu -> %llu params (%s)\n", a.out.c_str(),
                (unsigned long long) dern::param_count(m),
                (unsigned long long) dern::param_count(result.model), a.baseline.c_str());
}

void run_eval(const eval_args & a) {
    const auto t0 = std::chrono::steady_clock::now();
    const dern::moe_model orig = dern::load_model(a.original);
    const dern::moe_model comp = dern::load_model(a.compressed);
    dern::eval_report report = dern::evaluate_models(orig, comp, a.probes, a.seed);
    if (!std::isfinite(report.mse) || !std::isfinite(report.cosine)) {
        throw dern::numeric_error("NaN detected in evaluation metrics");
    }
    report.seconds = seconds_since(t0);
    dern::write_eval_json(report, a.probes, a.out);
    std::printf("wrote %s: mse=%s cosine=%s\n", a.out.c_str(), dern::fmt_sig9(report.mse).c_str(),
                dern::fmt_sig9(report.cosine).c_str());
}

void run_analyze_sim(const sim_args & a) {
    const dern::moe_model m = dern::load_model(a.model);
    const dern::sim_report report = dern::similarity_report(m, a.layer);
    dern::write_expert_sim_csv(report, a.layer, a.out_expert);
    dern::write_neuron_sim_csv(report, a.layer, a.out_neuron);
    std::printf("wrote %s and %s for layer %d\n", a.out_expert.c_str(), a.out_neuron.c_str(),
                a.layer);
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"DERN: drop experts, recombine neurons - SMoE expert pruning and reconstruction"};
    app.require_subcommand(1);
    // --h is a contract flag on gen, so help stays long-form only
    app.set_help_flag("--help", "print help");
    app.option_defaults()->ignore_case(false);

    gen_args ga;
    CLI::App * gen = app.add_subcommand("gen", "generate a synthetic SMoE model");
    gen->set_help_flag("--help", "print help");
    gen->add_option("--d", ga.d, "input dimension")->required();
    gen->add_option("--h", ga.h, "expert intermediate size")->required();
    gen->add_option("--experts", ga.experts, "experts per layer")->required();
    gen->add_option("--top-k", ga.top_k, "experts activated per token");
    gen->add_option("--layers", ga.layers, "layer count");
    gen->add_option("--groups", ga.groups, "redundancy groups, e.g. '0,1|2,3' or '2x4'");
    gen->add_option("--noise", ga.noise, "within-group noise sigma");
    gen->add_option("--seed", ga.seed, "generator seed");
    gen->add_option("--out", ga.out, "output .dmoe path")->required();
    gen->callback([&] { run_gen(ga); });

    calibrate_args ca;
    CLI::App * cal = app.add_subcommand("calibrate", "collect routing statistics");
    cal->add_option("--model", ca.model, "model .dmoe path")->required();
    cal->add_option("--synth-tokens", ca.synth_tokens, "synthesize this many calibration tokens");
    cal->add_option("--calib", ca.calib, "calibration .cal file");
    cal->add_option("--seed", ca.seed, "seed for synthetic tokens");
    cal->add_option("--out", ca.out, "output stats.json path")->required();
    cal->callback([&] { run_calibrate(ca); });

    compress_args pa;
    CLI::App * comp = app.add_subcommand("compress", "prune, reassign and reconstruct experts");
    comp->add_option("--model", pa.model, "model .dmoe path")->required();
    comp->add_option("--stats", pa.stats, "stats.json from calibrate")->required();
    comp->add_option("--retain", pa.retain, "experts kept per layer")->required();
    comp->add_option("--retain-per-layer", pa.retain_per_layer, "per-layer retain counts, comma separated");
    comp->add_option("--alpha", pa.alpha, "similarity threshold in [0,1]");
    comp->add_option("--ratio", pa.ratio, "reconstructed intermediate size ratio in (0,1]");
    comp->add_option("--mask", pa.mask, "similarity components: subset of gate,up,down");
    comp->add_option("--init", pa.init, "cluster init: gate|random|equidistant");
    comp->add_option("--weighting", pa.weighting, "importance weighting: on|off");
    comp->add_option("--baseline", pa.baseline, "dern|prune|average");
    comp->add_option("--seed", pa.seed, "pipeline seed");
    comp->add_option("--out", pa.out, "output .dmoe path")->required();
    comp->add_option("--report", pa.report, "write report.json with probe-based evaluation");
    comp->add_option("--dump-assignments", pa.dump_assignments, "write segment assignment csv");
    comp->add_option("--dump-clusters", pa.dump_clusters, "write cluster diagnostics csv");
    comp->add_option("--config", pa.config, "JSON cluster config (mirrors ClusterConfig fields)");
    comp->callback([&] { run_compress(pa); });

    eval_args ea;
    CLI::App * ev = app.add_subcommand("eval", "compare a compressed model to its original");
    ev->add_option("--original", ea.original, "original .dmoe path")->required();
    ev->add_option("--compressed", ea.compressed, "compressed .dmoe path")->required();
    ev->add_option("--probes", ea.probes, "probe token count");
    ev->add_option("--seed", ea.seed, "probe seed");
    ev->add_option("--out", ea.out, "output eval.json path")->required();
    ev->callback([&] { run_eval(ea); });

    sim_args sa;
    CLI::App * sim = app.add_subcommand("analyze-sim", "expert and neuron level similarity");
    sim->add_option("--model", sa.model, "model .dmoe path")->required();
    sim->add_option("--layer", sa.layer, "layer index");
    sim->add_option("--out-expert", sa.out_expert, "expert-level csv path")->required();
    sim->add_option("--out-neuron", sa.out_neuron, "neuron-level csv path")->required();
    sim->callback([&] { run_analyze_sim(sa); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const dern::arg_error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const dern::io_error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const dern::dim_error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const dern::numeric_error & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
