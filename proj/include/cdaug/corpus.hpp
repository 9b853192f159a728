#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdaug/annotations.hpp"
#include "cdaug/counter.hpp"
#include "cdaug/grid.hpp"
#include "cdaug/rng.hpp"

namespace cdaug {

inline constexpr int kSceneTags = 4;

struct SceneSpec {
  int n = 0;
  // 0 flat, 1 linear gradient, 2 checker, 3 low-frequency noise.
  int tag = 0;
  std::uint64_t seed = 0;
  int width = 64;
  int height = 64;
};

struct Scene {
  ImageGrid image;
  DotMap dots;
};

// Dark background chosen by tag with n bright anti-aliased discs on top. Disc
// centers lie on a 0.1 px grid, at least 3 px from the border and 2 px from
// each other.
Scene generate_scene(const SceneSpec& spec);

inline constexpr double kMinDotSeparation = 2.0;
inline constexpr double kDiscContrast = 0.4;

struct CorpusConfig {
  int train_scenes = 200;
  int test_scenes = 50;
  int min_count = 0;
  int max_count = 30;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 0;
};

struct SceneRecord {
  std::string scene_id;
  std::string split;
  int n = 0;
  int tag = 0;
  std::uint64_t seed = 0;
  friend bool operator==(const SceneRecord&, const SceneRecord&) = default;
};

// Scene list without touching the disk; generate_corpus writes exactly these.
std::vector<SceneRecord> plan_corpus(const CorpusConfig& cfg);

// Writes <root>/{train,test}/<scene_id>.{pgm,dots,dmap} and <root>/manifest.json.
std::vector<SceneRecord> generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& root);

std::vector<SceneRecord> read_manifest(const std::filesystem::path& root);

// Loads <dir>/<id>.{pgm,dots,dmap}; the label count is the number of dots.
LabeledImage load_labeled(const std::filesystem::path& dir, const std::string& id);

std::vector<LabeledImage> load_split(const std::filesystem::path& root, const std::string& split);

nlohmann::json to_json(const SceneRecord& r);

// Each draw is synthetic with probability `ratio`, then uniform within the
// chosen set. The synthetic set may be empty only when ratio is 0.
class MixedSampler {
 public:
  MixedSampler(const std::vector<LabeledImage>& real, const std::vector<LabeledImage>& synthetic, double ratio,
               std::uint64_t seed);

  const LabeledImage& next();
  bool last_was_synthetic() const { return last_synthetic_; }
  std::size_t draws() const { return draws_; }
  std::size_t synthetic_draws() const { return synthetic_draws_; }

 private:
  const std::vector<LabeledImage>& real_;
  const std::vector<LabeledImage>& synthetic_;
  double ratio_;
  Rng rng_;
  bool last_synthetic_ = false;
  std::size_t draws_ = 0;
  std::size_t synthetic_draws_ = 0;
};

}  // namespace cdaug
