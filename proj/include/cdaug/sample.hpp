#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdaug/counter.hpp"
#include "cdaug/denoiser.hpp"
#include "cdaug/schedule.hpp"

namespace cdaug {

struct GuidanceConfig {
  double s = 0.1;
  int steps = 50;
  std::uint64_t seed = 0;
  // Clamp the clean estimate to [-1, 1] before it reaches the counter.
  bool clamp_x0 = true;
  // Differentiate through the denoiser instead of treating its output as constant.
  bool full_backprop_guidance = false;
};

void validate(const GuidanceConfig& cfg, int T);

// (T - t) / T * s
double guidance_scale(int t, int T, double s);

template <typename T>
Grid<T> initial_noise(std::uint64_t seed, int height, int width);

// eps + alpha(t) * sqrt(1 - abar_t) * grad_{x_t} ||y_gt - counter(x0_hat)||^2.
// Returns predict_eps unchanged when alpha(t) is 0.
template <typename T>
Grid<T> guided_epsilon(const DenoiserParams<T>& p, const CounterParams<T>& counter, const Grid<T>& xt, int t,
                       const Conditioning& c, const Grid<T>& y_gt, const GuidanceConfig& cfg, const NoiseSchedule& s);

// Deterministic DDIM from x_T = initial_noise(cfg.seed) with counting guidance;
// the result is clamped to [-1, 1].
template <typename T>
Grid<T> sample_image(const DenoiserParams<T>& p, const CounterParams<T>& counter, const Conditioning& c,
                     const Grid<T>& y_gt, const GuidanceConfig& cfg, const NoiseSchedule& s);

// Plain DDIM with the same noise and step sequence and no counter involved.
template <typename T>
Grid<T> sample_unguided(const DenoiserParams<T>& p, const Conditioning& c, const GuidanceConfig& cfg,
                        const NoiseSchedule& s);

struct SyntheticRecord {
  std::string scene_id;
  int sample_idx = 0;
  std::uint64_t seed = 0;
  int tag = 0;
  // Relative to the output directory.
  std::string output_path;
  friend bool operator==(const SyntheticRecord&, const SyntheticRecord&) = default;
};

nlohmann::json to_json(const SyntheticRecord& r);

// Seed of sample k of a scene under master seed `seed`.
std::uint64_t sample_seed(std::uint64_t seed, const std::string& scene_id, int k);
// Tag of sample k: cycles through all tags from a per-scene offset.
int sample_tag(std::uint64_t seed, const std::string& scene_id, int k, int tags);

// For every scene in `annotations_dir` (files <id>.dots with optional <id>.dmap),
// draws per_image guided samples conditioned on its density map. Writes
// <out>/<id>_<k>.{pgm,dots,dmap} and <out>/manifest.jsonl. cfg.seed is the master seed.
std::vector<SyntheticRecord> batch_sample(const DenoiserParams<float>& p, const CounterParams<float>& counter,
                                          const std::filesystem::path& annotations_dir, int per_image,
                                          const GuidanceConfig& cfg, const NoiseSchedule& s,
                                          const std::filesystem::path& out);

std::vector<SyntheticRecord> read_synthetic_manifest(const std::filesystem::path& dir);
std::vector<LabeledImage> load_synthetic(const std::filesystem::path& dir);

}  // namespace cdaug
