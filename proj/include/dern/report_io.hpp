#pragma once

#include <string>
#include <vector>

#include "dern/pipeline.hpp"

namespace dern {

// all JSON/CSV floats carry 9 significant digits
double round_sig9(double v);
std::string fmt_sig9(double v);

void write_stats_json(const routing_stats & stats, const std::string & path);

// per-layer scores back out of a stats.json
std::vector<std::vector<double>> load_stats_scores(const std::string & path);

void write_eval_json(const eval_report & report, int probes, const std::string & path);

void write_compress_report_json(const compress_result & result, const eval_report & eval,
                                const compress_params & params, const std::string & path);

// RFC-4180: header row, CRLF line endings
void write_assignments_csv(const compress_result & result, const std::string & path);
void write_clusters_csv(const compress_result & result, const std::string & path);
void write_expert_sim_csv(const sim_report & report, int layer, const std::string & path);
void write_neuron_sim_csv(const sim_report & report, int layer, const std::string & path);

} // namespace dern
