#include "cdaug/corpus.hpp"

#include <algorithm>
#include <cmath>

#include "cdaug/io.hpp"

namespace cdaug {

namespace {

constexpr int kBorder = 3;
constexpr int kSupersample = 4;
constexpr int kMaxPlacementTries = 100000;

ImageGrid render_background(int tag, int h, int w, Rng& rng) {
  ImageGrid bg(h, w);
  switch (tag) {
    case 0: {
      const float level = static_cast<float>(rng.uniform(-0.7, -0.4));
      std::fill(bg.values.begin(), bg.values.end(), level);
      break;
    }
    case 1: {
      const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double ux = std::cos(angle), uy = std::sin(angle);
      const double half = 0.5 * std::hypot(w - 1.0, h - 1.0);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double proj = ((c - 0.5 * (w - 1)) * ux + (r - 0.5 * (h - 1)) * uy) / half;  // [-1, 1]
          bg.at(r, c) = static_cast<float>(-0.55 + 0.3 * proj);
        }
      break;
    }
    case 2: {
      const int cell = rng.uniform_int(6, 12);
      const int ox = rng.uniform_int(0, cell - 1), oy = rng.uniform_int(0, cell - 1);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) bg.at(r, c) = ((r + oy) / cell + (c + ox) / cell) % 2 ? -0.75f : -0.4f;
      break;
    }
    case 3: {
      // Bilinear upsampling of a coarse random lattice.
      constexpr int kCoarse = 5;
      double lattice[kCoarse][kCoarse];
      for (auto& row : lattice)
        for (double& v : row) v = rng.uniform(-0.85, -0.25);
      for (int r = 0; r < h; ++r) {
        const double fy = (kCoarse - 1) * r / std::max(1.0, h - 1.0);
        const int y0 = std::min(kCoarse - 2, static_cast<int>(fy));
        const double ty = fy - y0;
        for (int c = 0; c < w; ++c) {
          const double fx = (kCoarse - 1) * c / std::max(1.0, w - 1.0);
          const int x0 = std::min(kCoarse - 2, static_cast<int>(fx));
          const double tx = fx - x0;
          const double top = lattice[y0][x0] * (1 - tx) + lattice[y0][x0 + 1] * tx;
          const double bot = lattice[y0 + 1][x0] * (1 - tx) + lattice[y0 + 1][x0 + 1] * tx;
          bg.at(r, c) = static_cast<float>(top * (1 - ty) + bot * ty);
        }
      }
      break;
    }
    default:
      throw BoundsError("scene tag " + std::to_string(tag) + " outside [0, " + std::to_string(kSceneTags - 1) + "]");
  }
  return bg;
}

// Fraction of the pixel square centered at (col, row) covered by the disc.
double coverage(int row, int col, double cx, double cy, double radius) {
  int inside = 0;
  for (int i = 0; i < kSupersample; ++i) {
    const double y = row - 0.5 + (i + 0.5) / kSupersample;
    for (int j = 0; j < kSupersample; ++j) {
      const double x = col - 0.5 + (j + 0.5) / kSupersample;
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) ++inside;
    }
  }
  return static_cast<double>(inside) / (kSupersample * kSupersample);
}

std::string scene_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%04d", split.c_str(), index);
  return buf;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  if (spec.n < 0) throw ConfigError("scene: negative object count");
  if (spec.width <= 2 * kBorder || spec.height <= 2 * kBorder) throw ConfigError("scene: image too small");
  Rng rng(spec.seed);
  Scene s;
  s.image = render_background(spec.tag, spec.height, spec.width, rng);
  s.dots.width = spec.width;
  s.dots.height = spec.height;

  const int xs = 10 * (spec.width - 1 - 2 * kBorder), ys = 10 * (spec.height - 1 - 2 * kBorder);
  int tries = 0;
  while (static_cast<int>(s.dots.points.size()) < spec.n) {
    if (++tries > kMaxPlacementTries) throw ConfigError("scene: cannot place " + std::to_string(spec.n) + " separated dots");
    const Point p{kBorder + rng.uniform_int(0, xs) / 10.0, kBorder + rng.uniform_int(0, ys) / 10.0};
    const bool clear = std::all_of(s.dots.points.begin(), s.dots.points.end(), [&](const Point& q) {
      return std::hypot(p.x - q.x, p.y - q.y) >= kMinDotSeparation;
    });
    if (clear) s.dots.points.push_back(p);
  }

  const ImageGrid bg = s.image;
  for (const Point& p : s.dots.points) {
    const double radius = rng.uniform(1.5, 3.0);
    const int ic = static_cast<int>(std::lround(p.x)), ir = static_cast<int>(std::lround(p.y));
    const double contrast = rng.uniform(0.6, 1.1);
    const double level = std::min(1.0, bg.at(ir, ic) + contrast);
    const int reach = static_cast<int>(std::ceil(radius)) + 1;
    for (int r = std::max(0, ir - reach); r <= std::min(spec.height - 1, ir + reach); ++r)
      for (int c = std::max(0, ic - reach); c <= std::min(spec.width - 1, ic + reach); ++c) {
        const double a = coverage(r, c, p.x, p.y, radius);
        if (a > 0.0) s.image.at(r, c) = static_cast<float>((1.0 - a) * s.image.at(r, c) + a * level);
      }
  }
  return s;
}

std::vector<SceneRecord> plan_corpus(const CorpusConfig& cfg) {
  if (cfg.train_scenes < 0 || cfg.test_scenes < 0 || cfg.min_count < 0 || cfg.max_count < cfg.min_count) {
    throw ConfigError("corpus: invalid scene or count range");
  }
  Rng rng(cfg.seed);
  std::vector<SceneRecord> out;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", cfg.train_scenes}, {"test", cfg.test_scenes}}) {
    for (int i = 0; i < count; ++i) {
      SceneRecord r;
      r.scene_id = scene_id(split, i);
      r.split = split;
      r.n = rng.uniform_int(cfg.min_count, cfg.max_count);
      r.tag = rng.uniform_int(0, kSceneTags - 1);
      r.seed = rng.next_u64();
      out.push_back(std::move(r));
    }
  }
  return out;
}

nlohmann::json to_json(const SceneRecord& r) {
  return {{"scene_id", r.scene_id}, {"split", r.split}, {"n", r.n}, {"tag", r.tag}, {"seed", r.seed}};
}

std::vector<SceneRecord> generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& root) {
  const std::vector<SceneRecord> plan = plan_corpus(cfg);
  nlohmann::json scenes = nlohmann::json::array();
  for (const SceneRecord& r : plan) {
    const Scene s = generate_scene({r.n, r.tag, r.seed, cfg.width, cfg.height});
    const auto base = root / r.split / r.scene_id;
    write_file(base.string() + ".pgm", write_pgm(s.image));
    write_text(base.string() + ".dots", format_dots(s.dots));
    write_file(base.string() + ".dmap", write_density(render_density(s.dots)));
    scenes.push_back(to_json(r));
  }
  const nlohmann::json manifest = {{"width", cfg.width}, {"height", cfg.height}, {"scenes", scenes}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  return plan;
}

std::vector<SceneRecord> read_manifest(const std::filesystem::path& root) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(root / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corpus manifest: " + std::string(e.what()));
  }
  std::vector<SceneRecord> out;
  try {
    for (const auto& s : j.at("scenes")) {
      out.push_back({s.at("scene_id").get<std::string>(), s.at("split").get<std::string>(), s.at("n").get<int>(),
                     s.at("tag").get<int>(), s.at("seed").get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corpus manifest: " + std::string(e.what()));
  }
  return out;
}

LabeledImage load_labeled(const std::filesystem::path& dir, const std::string& id) {
  const auto base = (dir / id).string();
  LabeledImage it;
  it.id = id;
  it.image = read_pgm(read_file(base + ".pgm"));
  const DotMap dots = parse_dots(read_text(base + ".dots"));
  it.density = read_density(read_file(base + ".dmap"));
  if (!it.density.values.same_shape(it.image) || dots.width != it.image.width || dots.height != it.image.height) {
    throw ShapeError("scene '" + id + "': image, dots and density map sizes disagree");
  }
  it.count = static_cast<int>(dots.count());
  return it;
}

std::vector<LabeledImage> load_split(const std::filesystem::path& root, const std::string& split) {
  std::vector<LabeledImage> out;
  for (const SceneRecord& r : read_manifest(root)) {
    if (r.split == split) {
      out.push_back(load_labeled(root / split, r.scene_id));
      out.back().tag = r.tag;
    }
  }
  return out;
}

MixedSampler::MixedSampler(const std::vector<LabeledImage>& real, const std::vector<LabeledImage>& synthetic,
                           double ratio, std::uint64_t seed)
    : real_(real), synthetic_(synthetic), ratio_(ratio), rng_(seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mix ratio must lie in [0, 1]");
  if (real.empty() && ratio < 1.0) throw ConfigError("mixed sampler: real set is empty");
  if (synthetic.empty() && ratio > 0.0) throw ConfigError("mixed sampler: synthetic set is empty but ratio > 0");
}

const LabeledImage& MixedSampler::next() {
  last_synthetic_ = rng_.bernoulli(ratio_);
  const auto& set = last_synthetic_ ? synthetic_ : real_;
  ++draws_;
  if (last_synthetic_) ++synthetic_draws_;
  return set[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(set.size()) - 1))];
}

}  // namespace cdaug
