#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdaug/config.hpp"
#include "cdaug/counter.hpp"

namespace cdaug {

// Step order. Each step lives in <work>/<name>/ next to a stamp.json that
// records its config hash, the stamps of its inputs and hashes of its outputs.
inline const std::vector<std::string> kPipelineSteps{"corpus", "counter", "diffusion", "sample", "downstream",
                                                     "evaluate"};

struct PipelineResult {
  nlohmann::json report;
  // Steps actually executed (not reused) in this invocation.
  std::vector<std::string> executed;
};

// Runs every step whose outputs are missing or whose config or inputs changed.
// Failures are rethrown as StepError; an output whose content no longer matches
// its stamp raises StalenessError. The report is also written to <work>/report.json,
// and every executed step appends {"executed", "seconds"} to <work>/run_log.jsonl.
PipelineResult run_pipeline(const RunConfig& cfg, const std::filesystem::path& work);

struct SweepRow {
  double ratio = 0.0;
  Metrics metrics;
};

// Brings the pipeline up to date through "sample", then trains and evaluates
// one downstream counter per ratio on the same synthetic set.
std::vector<SweepRow> ratio_sweep(const RunConfig& cfg, const std::filesystem::path& work,
                                  const std::vector<double>& ratios);
nlohmann::json to_json(const std::vector<SweepRow>& rows);

// Downstream counter for one mix ratio. Ratio 0 never opens the synthetic set.
CounterParams<float> train_downstream(const RunConfig& cfg, const std::vector<LabeledImage>& real,
                                      const std::filesystem::path& synthetic_dir, double ratio);

// Per-stratum rows plus a total row.
nlohmann::json stratified_report(const Metrics& m);

}  // namespace cdaug
