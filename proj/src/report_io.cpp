#include "dern/report_io.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "json.hpp"

namespace dern {

std::string fmt_sig9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

double round_sig9(double v) {
    return std::strtod(fmt_sig9(v).c_str(), nullptr);
}

namespace {

void write_text(const std::string & path, const std::string & text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw io_error("cannot open for writing: " + path);
    }
    f.write(text.data(), std::streamsize(text.size()));
    if (!f) {
        throw io_error("write failed: " + path);
    }
}

nlohmann::ordered_json sig9_array(const std::vector<double> & values) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (double v : values) {
        arr.push_back(round_sig9(v));
    }
    return arr;
}

const char * baseline_name(baseline_kind b) {
    switch (b) {
        case baseline_kind::dern: return "dern";
        case baseline_kind::prune_only: return "prune";
        case baseline_kind::expert_average: return "average";
    }
    return "?";
}

} // namespace

void write_stats_json(const routing_stats & stats, const std::string & path) {
    const auto scores = importance_scores(stats);
    nlohmann::ordered_json j;
    j["token_count"] = stats.token_count;
    j["layers"] = nlohmann::ordered_json::array();
    for (size_t li = 0; li < stats.layers.size(); ++li) {
        nlohmann::ordered_json jl;
        jl["scores"] = sig9_array(scores[li]);
        jl["score_accum"] = sig9_array(stats.layers[li].score_accum);
        jl["hit_count"] = stats.layers[li].hit_count;
        j["layers"].push_back(std::move(jl));
    }
    write_text(path, j.dump(2) + "\n");
}

std::vector<std::vector<double>> load_stats_scores(const std::string & path) {
    std::ifstream f(path);
    if (!f) {
        throw io_error("cannot open: " + path);
    }
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception & e) {
        throw io_error("malformed stats file " + path + ": " + e.what());
    }
    if (!j.contains("layers") || !j["layers"].is_array()) {
        throw io_error("malformed stats file " + path + ": missing layers");
    }
    std::vector<std::vector<double>> scores;
    for (const auto & jl : j["layers"]) {
        if (!jl.contains("scores") || !jl["scores"].is_array()) {
            throw io_error("malformed stats file " + path + ": missing scores");
        }
        scores.push_back(jl["scores"].get<std::vector<double>>());
    }
    return scores;
}

void write_eval_json(const eval_report & report, int probes, const std::string & path) {
    nlohmann::ordered_json j;
    j["mse"] = round_sig9(report.mse);
    j["cosine"] = round_sig9(report.cosine);
    j["param_original"] = report.param_before;
    j["param_compressed"] = report.param_after;
    j["probes"] = probes;
    j["seconds"] = round_sig9(report.seconds);
    j["layers"] = nlohmann::ordered_json::array();
    for (const eval_layer & el : report.layers) {
        j["layers"].push_back({{"mse", round_sig9(el.mse)}, {"cosine", round_sig9(el.cosine)}});
    }
    write_text(path, j.dump(2) + "\n");
}

void write_compress_report_json(const compress_result & result, const eval_report & eval,
                                const compress_params & params, const std::string & path) {
    nlohmann::ordered_json j;
    j["baseline"] = baseline_name(params.baseline);
    j["alpha"] = round_sig9(params.alpha);
    j["ratio"] = round_sig9(params.ratio);
    j["param_before"] = eval.param_before;
    j["param_after"] = eval.param_after;
    j["mse"] = round_sig9(eval.mse);
    j["cosine"] = round_sig9(eval.cosine);
    j["seconds"] = round_sig9(eval.seconds);
    j["layers"] = nlohmann::ordered_json::array();
    for (size_t li = 0; li < result.layers.size(); ++li) {
        const layer_report & lr = result.layers[li];
        nlohmann::ordered_json jl;
        jl["retained"] = lr.retained;
        jl["pruned"] = lr.pruned;
        jl["retained_ratio"] = round_sig9(lr.retained_ratio);
        if (li < eval.layers.size()) {
            jl["mse"] = round_sig9(eval.layers[li].mse);
            jl["cosine"] = round_sig9(eval.layers[li].cosine);
        }
        j["layers"].push_back(std::move(jl));
    }
    write_text(path, j.dump(2) + "\n");
}

// CSVs are RFC-4180: header row, CRLF terminators

void write_assignments_csv(const compress_result & result, const std::string & path) {
    std::string out = "layer,source_expert,source_index,target_expert,best_similarity\r\n";
    for (size_t li = 0; li < result.layers.size(); ++li) {
        for (const assignment_record & rec : result.layers[li].assignments) {
            out += std::to_string(li) + "," + std::to_string(rec.source_expert) + "," +
                   std::to_string(rec.source_index) + "," + std::to_string(rec.target_expert) +
                   "," + fmt_sig9(rec.best_similarity) + "\r\n";
        }
    }
    write_text(path, out);
}

void write_clusters_csv(const compress_result & result, const std::string & path) {
    std::string out = "layer,expert,cluster_id,member_count,r_bar,final_objective\r\n";
    for (size_t li = 0; li < result.layers.size(); ++li) {
        for (const expert_cluster_info & info : result.layers[li].clusters) {
            for (size_t c = 0; c < info.member_count.size(); ++c) {
                out += std::to_string(li) + "," + std::to_string(info.expert_id) + "," +
                       std::to_string(c) + "," + std::to_string(info.member_count[c]) + "," +
                       fmt_sig9(info.r_bar[c]) + "," + fmt_sig9(info.final_objective) + "\r\n";
            }
        }
    }
    write_text(path, out);
}

void write_expert_sim_csv(const sim_report & report, int layer, const std::string & path) {
    std::string out = "layer,expert_i,expert_j,cosine\r\n";
    for (size_t i = 0; i < report.expert_level.size(); ++i) {
        for (size_t j = 0; j < report.expert_level[i].size(); ++j) {
            out += std::to_string(layer) + "," + std::to_string(i) + "," + std::to_string(j) +
                   "," + fmt_sig9(report.expert_level[i][j]) + "\r\n";
        }
    }
    write_text(path, out);
}

void write_neuron_sim_csv(const sim_report & report, int layer, const std::string & path) {
    std::string out = "layer,expert_i,expert_j,neuron,max_cosine\r\n";
    for (size_t i = 0; i < report.neuron_level.size(); ++i) {
        for (size_t j = 0; j < report.neuron_level[i].size(); ++j) {
            for (size_t p = 0; p < report.neuron_level[i][j].size(); ++p) {
                out += std::to_string(layer) + "," + std::to_string(i) + "," + std::to_string(j) +
                       "," + std::to_string(p) + "," + fmt_sig9(report.neuron_level[i][j][p]) +
                       "\r\n";
            }
        }
    }
    write_text(path, out);
}

} // namespace dern
