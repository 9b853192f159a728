#include "cdaug/sample.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cdaug/corpus.hpp"
#include "cdaug/io.hpp"
#include "cdaug/nn/ops.hpp"
#include "cdaug/rng.hpp"

namespace cdaug {

namespace {

template <typename T>
void require_finite(const Grid<T>& g, int t, const char* what) {
  for (T v : g.values)
    if (!std::isfinite(static_cast<double>(v))) {
      throw SamplingError(std::string(what) + " is not finite at t=" + std::to_string(t));
    }
}

// Gradient of the counting loss of the clean estimate with respect to x_t,
// holding the noise prediction fixed.
template <typename T>
Grid<T> stop_gradient_guidance(const CounterParams<T>& counter, const Grid<T>& xt, const Grid<T>& eps, int t,
                               const Grid<T>& y_gt, bool clamp_x0, const NoiseSchedule& s) {
  Grid<T> x0 = predict_x0(xt, t, eps, s);
  Grid<T> inside(x0.height, x0.width, T(1));
  if (clamp_x0) {
    for (std::size_t i = 0; i < x0.size(); ++i) {
      const T v = x0.values[i];
      if (!(v > T(-1) && v < T(1))) inside.values[i] = T(0);
      x0.values[i] = std::clamp(v, T(-1), T(1));
    }
  }
  Grid<T> g = counting_input_gradient(counter, x0, y_gt);
  const double inv = 1.0 / s.sqrt_alpha_bar(t);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = static_cast<T>(g.values[i] * inside.values[i] * inv);
  return g;
}

template <typename T>
Grid<T> full_guidance(const DenoiserParams<T>& p, const CounterParams<T>& counter, const Grid<T>& xt, int t,
                      const Conditioning& c, const Grid<T>& y_gt, bool clamp_x0, const NoiseSchedule& s) {
  const double sa = s.sqrt_alpha_bar(t);
  const T ca = static_cast<T>(1.0 / sa);
  const T cb = static_cast<T>(-s.sqrt_one_minus_alpha_bar(t) / sa);
  nn::Tensor<T> target(1, 1, y_gt.height, y_gt.width);
  target.data = y_gt.values;
  const LossBuilder<T> loss = [&](nn::Tape<T>& tape, nn::Var x, nn::Var eps) {
    nn::Var x0 = nn::per_sample_affine(tape, x, eps, std::vector<T>{ca}, std::vector<T>{cb});
    if (clamp_x0) x0 = nn::clamp(tape, x0, T(-1), T(1));
    auto bound = counter.params.bind(tape, nn::no_blocks());
    nn::Var d = counter_forward(tape, counter, bound, x0);
    return nn::sq_diff_per_sample(tape, d, tape.constant(target));
  };
  return input_gradient(p, xt, t, c, loss);
}

template <typename T>
Grid<T> run_ddim(const Conditioning& c, const GuidanceConfig& cfg, const NoiseSchedule& s,
                 const std::function<Grid<T>(const Grid<T>&, int)>& epsilon) {
  validate(cfg, s.T);
  const int H = c.dmap.height(), W = c.dmap.width();
  Grid<T> x = initial_noise<T>(cfg.seed, H, W);
  const std::vector<int> seq = timestep_subsequence(s.T, cfg.steps);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int t = seq[i];
    const int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
    x = ddim_step(x, epsilon(x, t), t, t_prev, s);
    require_finite(x, t, "sample");
  }
  for (T& v : x.values) v = std::clamp(v, T(-1), T(1));
  return x;
}

}  // namespace

void validate(const GuidanceConfig& cfg, int T) {
  if (!(cfg.s >= 0.0) || !std::isfinite(cfg.s)) throw ConfigError("guidance scale s must be a nonnegative number");
  if (cfg.steps < 1 || cfg.steps > T) {
    throw ConfigError("sampler steps must lie in [1, " + std::to_string(T) + "], got " + std::to_string(cfg.steps));
  }
}

double guidance_scale(int t, int T, double s) { return static_cast<double>(T - t) / T * s; }

template <typename T>
Grid<T> initial_noise(std::uint64_t seed, int height, int width) {
  Rng rng(seed);
  Grid<T> g(height, width);
  for (T& v : g.values) v = static_cast<T>(rng.normal());
  return g;
}

template <typename T>
Grid<T> guided_epsilon(const DenoiserParams<T>& p, const CounterParams<T>& counter, const Grid<T>& xt, int t,
                       const Conditioning& c, const Grid<T>& y_gt, const GuidanceConfig& cfg, const NoiseSchedule& s) {
  require_same_shape(xt, y_gt, "guided_epsilon");
  Grid<T> eps = predict_eps(p, xt, t, c);
  const double alpha = guidance_scale(t, s.T, cfg.s);
  if (alpha == 0.0) return eps;
  const Grid<T> g = cfg.full_backprop_guidance ? full_guidance(p, counter, xt, t, c, y_gt, cfg.clamp_x0, s)
                                               : stop_gradient_guidance(counter, xt, eps, t, y_gt, cfg.clamp_x0, s);
  require_finite(g, t, "counting guidance gradient");
  const double k = alpha * s.sqrt_one_minus_alpha_bar(t);
  for (std::size_t i = 0; i < eps.size(); ++i) eps.values[i] = static_cast<T>(eps.values[i] + k * g.values[i]);
  return eps;
}

template <typename T>
Grid<T> sample_image(const DenoiserParams<T>& p, const CounterParams<T>& counter, const Conditioning& c,
                     const Grid<T>& y_gt, const GuidanceConfig& cfg, const NoiseSchedule& s) {
  return run_ddim<T>(c, cfg, s, [&](const Grid<T>& x, int t) {
    return guided_epsilon(p, counter, x, t, c, y_gt, cfg, s);
  });
}

template <typename T>
Grid<T> sample_unguided(const DenoiserParams<T>& p, const Conditioning& c, const GuidanceConfig& cfg,
                        const NoiseSchedule& s) {
  return run_ddim<T>(c, cfg, s, [&](const Grid<T>& x, int t) { return predict_eps(p, x, t, c); });
}

nlohmann::json to_json(const SyntheticRecord& r) {
  return {{"scene_id", r.scene_id},
          {"sample_idx", r.sample_idx},
          {"seed", r.seed},
          {"tag", r.tag},
          {"output_path", r.output_path}};
}

std::uint64_t sample_seed(std::uint64_t seed, const std::string& scene_id, int k) {
  return derive_seed(derive_seed(seed, scene_id), static_cast<std::uint64_t>(k));
}

int sample_tag(std::uint64_t seed, const std::string& scene_id, int k, int tags) {
  const auto offset = static_cast<int>(derive_seed(seed, "tag:" + scene_id) % static_cast<std::uint64_t>(tags));
  return (offset + k) % tags;
}

std::vector<SyntheticRecord> batch_sample(const DenoiserParams<float>& p, const CounterParams<float>& counter,
                                          const std::filesystem::path& annotations_dir, int per_image,
                                          const GuidanceConfig& cfg, const NoiseSchedule& s,
                                          const std::filesystem::path& out) {
  if (per_image < 0) throw ConfigError("per_image must be nonnegative");
  validate(cfg, s.T);
  if (!std::filesystem::is_directory(annotations_dir)) {
    throw ConfigError("annotations directory '" + annotations_dir.string() + "' does not exist");
  }
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(annotations_dir))
    if (e.is_regular_file() && e.path().extension() == ".dots") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());

  std::vector<SyntheticRecord> records;
  std::ostringstream manifest;
  for (const std::string& id : ids) {
    const auto base = (annotations_dir / id).string();
    const std::string dots_text = read_text(base + ".dots");
    const DotMap dots = parse_dots(dots_text);
    const auto dmap_path = base + ".dmap";
    const Bytes dmap_bytes =
        std::filesystem::exists(dmap_path) ? read_file(dmap_path) : write_density(render_density(dots));
    const DensityMap dmap = read_density(dmap_bytes);
    for (int k = 0; k < per_image; ++k) {
      SyntheticRecord r{id, k, sample_seed(cfg.seed, id, k), sample_tag(cfg.seed, id, k, p.arch.tags), ""};
      r.output_path = id + "_" + std::to_string(k) + ".pgm";
      GuidanceConfig g = cfg;
      g.seed = r.seed;
      const ImageGrid img = sample_image(p, counter, Conditioning{r.tag, dmap}, dmap.values, g, s);
      const std::string stem = (out / (id + "_" + std::to_string(k))).string();
      write_file(stem + ".pgm", write_pgm(img));
      write_text(stem + ".dots", dots_text);
      write_file(stem + ".dmap", dmap_bytes);
      manifest << to_json(r).dump() << "\n";
      records.push_back(std::move(r));
    }
  }
  write_text(out / "manifest.jsonl", manifest.str());
  return records;
}

std::vector<SyntheticRecord> read_synthetic_manifest(const std::filesystem::path& dir) {
  std::istringstream in(read_text(dir / "manifest.jsonl"));
  std::vector<SyntheticRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("scene_id").get<std::string>(), j.at("sample_idx").get<int>(),
                     j.at("seed").get<std::uint64_t>(), j.at("tag").get<int>(), j.at("output_path").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("synthetic manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<LabeledImage> load_synthetic(const std::filesystem::path& dir) {
  std::vector<LabeledImage> out;
  for (const SyntheticRecord& r : read_synthetic_manifest(dir)) {
    out.push_back(load_labeled(dir, std::filesystem::path(r.output_path).stem().string()));
    out.back().tag = r.tag;
  }
  return out;
}

template Grid<float> initial_noise(std::uint64_t, int, int);
template Grid<double> initial_noise(std::uint64_t, int, int);
template Grid<float> guided_epsilon(const DenoiserParams<float>&, const CounterParams<float>&, const Grid<float>&, int,
                                    const Conditioning&, const Grid<float>&, const GuidanceConfig&,
                                    const NoiseSchedule&);
template Grid<double> guided_epsilon(const DenoiserParams<double>&, const CounterParams<double>&, const Grid<double>&,
                                     int, const Conditioning&, const Grid<double>&, const GuidanceConfig&,
                                     const NoiseSchedule&);
template Grid<float> sample_image(const DenoiserParams<float>&, const CounterParams<float>&, const Conditioning&,
                                  const Grid<float>&, const GuidanceConfig&, const NoiseSchedule&);
template Grid<double> sample_image(const DenoiserParams<double>&, const CounterParams<double>&, const Conditioning&,
                                   const Grid<double>&, const GuidanceConfig&, const NoiseSchedule&);
template Grid<float> sample_unguided(const DenoiserParams<float>&, const Conditioning&, const GuidanceConfig&,
                                     const NoiseSchedule&);
template Grid<double> sample_unguided(const DenoiserParams<double>&, const Conditioning&, const GuidanceConfig&,
                                      const NoiseSchedule&);

}  // namespace cdaug
