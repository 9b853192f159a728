#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdaug/corpus.hpp"
#include "cdaug/counter.hpp"
#include "cdaug/denoiser.hpp"
#include "cdaug/sample.hpp"
#include "cdaug/train.hpp"

namespace cdaug {

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

// Everything a run needs. Per-module seeds are not configured directly: they
// are named substreams of `seed` (see resolve_seeds).
struct RunConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  ScheduleConfig schedule;
  DenoiserArch arch;
  TrainConfig train;
  GuidanceConfig sampler;
  CounterTrainConfig counter;
  int per_image = 3;
  double mix_ratio = 0.3;
  std::vector<double> sweep_ratios{0.0, 0.1, 0.3, 0.5};
};

struct Seeds {
  std::uint64_t master = 0;
  std::uint64_t corpus = 0;
  std::uint64_t counter = 0;
  std::uint64_t train = 0;
  std::uint64_t sample = 0;
  std::uint64_t mix = 0;
  std::uint64_t downstream = 0;
};

Seeds resolve_seeds(std::uint64_t master);
// Copies the substream seeds into the module sections.
RunConfig with_resolved_seeds(RunConfig cfg);

nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json to_json(const Seeds& s);
// Unknown keys and ill-typed values raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
void validate(const RunConfig& cfg);

// "a.b.c=value": value is parsed as JSON when possible, otherwise kept as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// `base` (the defaults unless given), patched by the file if any, then by each override in order.
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          const RunConfig& base = RunConfig{});

// A few scenes, T = 50, two epochs and narrow networks; finishes in seconds.
RunConfig smoke_config();

}  // namespace cdaug
