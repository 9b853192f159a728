#include "cdaug/counter.hpp"

#include <cmath>
#include <numeric>

#include "cdaug/nn/ops.hpp"
#include "cdaug/rng.hpp"

namespace cdaug {

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;
constexpr int kLayers = 5;

std::array<int, kLayers + 1> channels(const CounterArch& a) {
  return {1, a.hidden[0], a.hidden[1], a.hidden[2], a.hidden[3], 1};
}

void validate(const CounterArch& a) {
  for (int w : a.hidden)
    if (w <= 0 || w > 4096) throw ConfigError("counter arch: hidden widths must be in [1, 4096]");
}

void build_layout(const CounterArch& a, nn::ParamSet<float>& ps) {
  const auto ch = channels(a);
  for (int l = 0; l < kLayers; ++l) {
    const std::string name = l + 1 == kLayers ? "head" : "conv" + std::to_string(l);
    ps.add(name + ".w", ch[l + 1], ch[l], 3, 3, true);
    ps.add(name + ".b", ch[l + 1], 1, 1, 1, true);
  }
}

template <typename T>
nn::Tensor<T> as_tensor(const Grid<T>& g) {
  nn::Tensor<T> t(1, 1, g.height, g.width);
  t.data = g.values;
  return t;
}

template <typename T>
Grid<T> as_grid(const nn::Tensor<T>& t) {
  Grid<T> g(t.h, t.w);
  g.values = t.data;
  return g;
}

void check_image(const char* what, int h, int w) {
  if (h <= 0 || w <= 0) throw ShapeError(std::string(what) + ": empty image");
}

}  // namespace

CounterParams<float> init_counter(const CounterArch& arch, std::uint64_t seed) {
  validate(arch);
  CounterParams<float> p;
  p.arch = arch;
  build_layout(arch, p.params);
  Rng rng(seed);
  for (auto& b : p.params.blocks()) {
    if (b.name.rfind("head", 0) == 0 || b.name.ends_with(".b")) continue;
    const double stddev = 1.0 / std::sqrt(static_cast<double>(b.c) * b.h * b.w);
    for (float& v : b.values) v = static_cast<float>(stddev * rng.normal());
  }
  return p;
}

template <typename T>
nn::Var counter_forward(nn::Tape<T>& tape, const CounterParams<T>& p, const std::vector<nn::Var>& bound, nn::Var img) {
  if (tape.value(img).c != 1) throw ShapeError("counter: input must have one channel");
  if (bound.size() != p.params.count() || bound.size() != 2 * kLayers) {
    throw ShapeError("counter: parameter set does not match architecture");
  }
  nn::Var h = img;
  for (int l = 0; l < kLayers; ++l) {
    h = nn::conv2d(tape, h, bound[2 * l], bound[2 * l + 1]);
    h = l + 1 == kLayers ? nn::relu(tape, h) : nn::silu(tape, h);
  }
  return h;
}

template <typename T>
Grid<T> predict_density_grid(const CounterParams<T>& p, const Grid<T>& img) {
  check_image("predict_density", img.height, img.width);
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  nn::Var out = counter_forward(tape, p, bound, tape.constant(as_tensor(img)));
  return as_grid(tape.value(out));
}

DensityMap predict_density(const CounterParams<float>& p, const ImageGrid& img) {
  return DensityMap{predict_density_grid(p, img), kDefaultKernelVariance};
}

template <typename T>
double count(const CounterParams<T>& p, const Grid<T>& img) {
  const Grid<T> d = predict_density_grid(p, img);
  double s = 0.0;
  for (T v : d.values) s += v;
  return s;
}

template <typename T>
double counting_loss(const CounterParams<T>& p, const Grid<T>& img, const Grid<T>& y_gt) {
  require_same_shape(img, y_gt, "counting_loss");
  const Grid<T> d = predict_density_grid(p, img);
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double r = static_cast<double>(d.values[i]) - y_gt.values[i];
    s += r * r;
  }
  return s;
}

template <typename T>
Grid<T> counting_input_gradient(const CounterParams<T>& p, const Grid<T>& img, const Grid<T>& y_gt) {
  require_same_shape(img, y_gt, "counting_input_gradient");
  check_image("counting_input_gradient", img.height, img.width);
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  nn::Var x = tape.variable(as_tensor(img));
  nn::Var pred = counter_forward(tape, p, bound, x);
  nn::Var loss = nn::sq_diff_per_sample(tape, pred, tape.constant(as_tensor(y_gt)));
  tape.backward(loss);
  return as_grid(tape.grad(x));
}

Bytes save_counter(const CounterParams<float>& p) {
  ByteWriter w;
  w.raw("CNTR1");
  w.u8(kCheckpointVersion);
  for (int v : p.arch.hidden) w.u32(static_cast<std::uint32_t>(v));
  w.u64(p.params.total_size());
  p.params.write_values(w);
  return w.take();
}

CounterParams<float> load_counter(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "counter checkpoint");
  r.expect_magic("CNTR1");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("counter checkpoint: unsupported version " + std::to_string(version));
  }
  CounterParams<float> p;
  for (int& v : p.arch.hidden) {
    const std::uint32_t f = r.u32();
    if (f == 0 || f > 4096) throw FormatError("counter checkpoint: implausible architecture field");
    v = static_cast<int>(f);
  }
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / 4) throw FormatError("counter checkpoint: truncated parameter payload");
  build_layout(p.arch, p.params);
  if (n != p.params.total_size()) {
    throw FormatError("counter checkpoint: parameter count " + std::to_string(n) + " does not match architecture (" +
                      std::to_string(p.params.total_size()) + ")");
  }
  p.params.read_values(r);
  r.expect_end();
  return p;
}

CounterTrainResult train_counter_stream(const std::function<const LabeledImage&()>& next,
                                        std::size_t draws_per_epoch, const CounterTrainConfig& cfg) {
  if (draws_per_epoch == 0) throw ConfigError("train_counter: empty corpus");
  if (cfg.epochs < 0 || cfg.batch_size <= 0 || !(cfg.learn_rate > 0.0)) {
    throw ConfigError("train_counter: epochs >= 0, batch_size > 0 and learn_rate > 0 required");
  }
  CounterTrainResult res{init_counter(cfg.arch, derive_seed(cfg.seed, "init")), {}};
  nn::Adam<float> adam(res.params.params, cfg.learn_rate);
  const auto everything = nn::all_blocks();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t done = 0;
    while (done < draws_per_epoch) {
      const int n = static_cast<int>(std::min<std::size_t>(cfg.batch_size, draws_per_epoch - done));
      std::vector<const LabeledImage*> items;
      for (int i = 0; i < n; ++i) items.push_back(&next());
      const int H = items[0]->image.height, W = items[0]->image.width;
      nn::Tensor<float> x(n, 1, H, W), y(n, 1, H, W);
      for (int i = 0; i < n; ++i) {
        const LabeledImage& it = *items[i];
        if (it.image.height != H || it.image.width != W || !it.density.values.same_shape(it.image)) {
          throw ShapeError("train_counter: image '" + it.id + "' differs in size from its batch");
        }
        std::copy(it.image.values.begin(), it.image.values.end(), x.sample(i));
        std::copy(it.density.values.values.begin(), it.density.values.values.end(), y.sample(i));
      }
      nn::Tape<float> tape;
      auto bound = res.params.params.bind(tape, everything);
      nn::Var pred = counter_forward(tape, res.params, bound, tape.constant(std::move(x)));
      nn::Var per = nn::sq_diff_per_sample(tape, pred, tape.constant(std::move(y)));
      nn::Var loss = nn::weighted_sum(tape, per, std::vector<float>(n, 1.0f / n));
      tape.backward(loss);
      adam.step(res.params.params, res.params.params.gradients(tape, bound), everything);
      for (float v : tape.value(per).data) loss_sum += v;
      done += n;
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(draws_per_epoch));
  }
  return res;
}

CounterTrainResult train_counter(const std::vector<LabeledImage>& corpus, const CounterTrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("train_counter: empty corpus");
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  auto next = [&]() -> const LabeledImage& {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
      }
      cursor = 0;
    }
    return corpus[order[cursor++]];
  };
  return train_counter_stream(next, corpus.size(), cfg);
}

std::vector<Stratum> default_strata() { return {{0, 10}, {10, 20}, {20, -1}}; }

Metrics compute_metrics(std::span<const double> preds, std::span<const double> gts, const std::vector<Stratum>& strata) {
  if (preds.size() != gts.size()) throw ShapeError("compute_metrics: prediction and ground-truth counts differ");
  auto summarize = [&](auto&& keep, std::size_t& n, double& mae, double& mse) {
    double abs_sum = 0.0, sq_sum = 0.0;
    n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (!keep(gts[i])) continue;
      const double e = preds[i] - gts[i];
      abs_sum += std::abs(e);
      sq_sum += e * e;
      ++n;
    }
    mae = n ? abs_sum / static_cast<double>(n) : 0.0;
    mse = n ? std::sqrt(sq_sum / static_cast<double>(n)) : 0.0;
  };
  Metrics m;
  summarize([](double) { return true; }, m.n, m.mae, m.mse);
  for (const Stratum& s : strata) {
    StratumMetrics sm;
    sm.range = s;
    summarize([&](double g) { return s.contains(g); }, sm.n, sm.mae, sm.mse);
    m.per_stratum.push_back(sm);
  }
  return m;
}

Metrics evaluate(const CounterParams<float>& p, const std::vector<LabeledImage>& testset,
                 const std::vector<Stratum>& strata) {
  std::vector<double> preds, gts;
  for (const LabeledImage& it : testset) {
    preds.push_back(count(p, it.image));
    gts.push_back(static_cast<double>(it.count));
  }
  return compute_metrics(preds, gts, strata);
}

nlohmann::json to_json(const Metrics& m) {
  nlohmann::json strata = nlohmann::json::array();
  for (const auto& s : m.per_stratum) {
    strata.push_back({{"lo", s.range.lo},
                      {"hi", s.range.hi < 0 ? nlohmann::json(nullptr) : nlohmann::json(s.range.hi)},
                      {"n", s.n},
                      {"mae", s.mae},
                      {"mse", s.mse}});
  }
  return {{"n", m.n}, {"mae", m.mae}, {"mse", m.mse}, {"strata", strata}};
}

template nn::Var counter_forward(nn::Tape<float>&, const CounterParams<float>&, const std::vector<nn::Var>&, nn::Var);
template nn::Var counter_forward(nn::Tape<double>&, const CounterParams<double>&, const std::vector<nn::Var>&, nn::Var);
template Grid<float> predict_density_grid(const CounterParams<float>&, const Grid<float>&);
template Grid<double> predict_density_grid(const CounterParams<double>&, const Grid<double>&);
template double count(const CounterParams<float>&, const Grid<float>&);
template double count(const CounterParams<double>&, const Grid<double>&);
template double counting_loss(const CounterParams<float>&, const Grid<float>&, const Grid<float>&);
template double counting_loss(const CounterParams<double>&, const Grid<double>&, const Grid<double>&);
template Grid<float> counting_input_gradient(const CounterParams<float>&, const Grid<float>&, const Grid<float>&);
template Grid<double> counting_input_gradient(const CounterParams<double>&, const Grid<double>&, const Grid<double>&);

}  // namespace cdaug
