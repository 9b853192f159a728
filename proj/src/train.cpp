#include "cdaug/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdaug/nn/ops.hpp"

namespace cdaug {

namespace {

template <typename T>
nn::Tensor<T> stack(const std::vector<const Grid<T>*>& grids) {
  const int H = grids.front()->height, W = grids.front()->width;
  nn::Tensor<T> t(static_cast<int>(grids.size()), 1, H, W);
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i]->height != H || grids[i]->width != W) throw ShapeError("training batch: grids differ in size");
    std::copy(grids[i]->values.begin(), grids[i]->values.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

template <typename T>
struct Recorded {
  nn::Var total;
  CombinedLoss values;
};

// Records the batch objective on `tape`. `gated` lists the samples that get the
// counting term; with `with_count` false the counter is skipped entirely.
template <typename T>
Recorded<T> record(nn::Tape<T>& tape, const DenoiserParams<T>& p, const std::vector<nn::Var>& bound,
                   const CounterParams<T>& counter, const std::vector<TrainSample<T>>& batch,
                   const std::vector<int>& gated, double lambda, bool clamp_x0, bool with_count,
                   const NoiseSchedule& s) {
  if (batch.empty()) throw ShapeError("training batch is empty");
  const int N = static_cast<int>(batch.size());
  std::vector<Grid<T>> xt;
  std::vector<int> steps;
  std::vector<Conditioning> conds;
  std::vector<const Grid<T>*> eps;
  for (const auto& b : batch) {
    require_same_shape(b.x0, b.eps, "training sample");
    xt.push_back(forward_diffuse(b.x0, b.t, b.eps, s));
    steps.push_back(b.t);
    conds.push_back(b.cond);
    eps.push_back(&b.eps);
  }
  const DenoiserBatch<T> db = make_batch(xt, steps, conds);
  nn::Var x = tape.constant(db.xt);
  nn::Var pred = denoiser_forward(tape, p, bound, x, db.steps, db.tags, tape.constant(db.dmap));
  nn::Var per_c = nn::sq_diff_per_sample(tape, pred, tape.constant(stack(eps)));
  const T inv_n = T(1) / static_cast<T>(N);
  nn::Var lc = nn::weighted_sum(tape, per_c, std::vector<T>(N, inv_n));

  Recorded<T> out;
  out.values.loss_c = static_cast<double>(tape.value(lc).data[0]);
  out.values.gated = gated;
  out.values.ungated = batch.size() - gated.size();
  out.total = lc;
  if (gated.empty() || !with_count) {
    out.values.loss_total = out.values.loss_c;
    return out;
  }

  std::vector<T> ca, cb;
  std::vector<const Grid<T>*> targets;
  for (int i : gated) {
    const int t = batch[i].t;
    const double sa = s.sqrt_alpha_bar(t);
    ca.push_back(static_cast<T>(1.0 / sa));
    cb.push_back(static_cast<T>(-s.sqrt_one_minus_alpha_bar(t) / sa));
    require_same_shape(batch[i].x0, batch[i].y_gt, "training sample target");
    targets.push_back(&batch[i].y_gt);
  }
  nn::Var x0_hat =
      nn::per_sample_affine(tape, nn::select_samples(tape, x, gated), nn::select_samples(tape, pred, gated), ca, cb);
  if (clamp_x0) x0_hat = nn::clamp(tape, x0_hat, T(-1), T(1));
  auto cbound = counter.params.bind(tape, nn::no_blocks());
  nn::Var density = counter_forward(tape, counter, cbound, x0_hat);
  nn::Var per_n = nn::sq_diff_per_sample(tape, density, tape.constant(stack(targets)));
  nn::Var ln = nn::weighted_sum(tape, per_n, std::vector<T>(gated.size(), inv_n));

  out.values.loss_count = static_cast<double>(tape.value(ln).data[0]);
  for (T v : tape.value(per_n).data) out.values.per_sample_count.push_back(static_cast<double>(v));
  out.total = nn::add(tape, lc, nn::scale(tape, ln, static_cast<T>(lambda)));
  out.values.loss_total = static_cast<double>(tape.value(out.total).data[0]);
  return out;
}

template <typename T>
std::vector<int> gate(const std::vector<TrainSample<T>>& batch, const LossSettings& ls) {
  std::vector<int> g;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (counting_applies(batch[i].t, ls.threshold, ls.gate_direction)) g.push_back(static_cast<int>(i));
  return g;
}

template <typename T>
std::vector<int> everyone(const std::vector<TrainSample<T>>& batch) {
  std::vector<int> g(batch.size());
  std::iota(g.begin(), g.end(), 0);
  return g;
}

}  // namespace

void validate(const TrainConfig& cfg, int T) {
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw ConfigError("train.lambda must be a nonnegative number");
  if (cfg.t_threshold < 0 || cfg.t_threshold > 1000) throw ConfigError("train.t_threshold must lie in [0, 1000]");
  if (!(cfg.learn_rate > 0.0)) throw ConfigError("train.learn_rate must be positive");
  if (!(cfg.dropout_ratio >= 0.0 && cfg.dropout_ratio <= 1.0)) throw ConfigError("train.dropout_ratio must lie in [0, 1]");
  if (cfg.epochs < 0 || cfg.pretrain_epochs < 0 || cfg.batch_size <= 0) {
    throw ConfigError("train: epochs must be >= 0 and batch_size > 0");
  }
  if (cfg.auto_lambda && cfg.auto_lambda_batches <= 0) throw ConfigError("train.auto_lambda_batches must be positive");
  if (T <= 0) throw ConfigError("train: schedule has no steps");
}

int effective_threshold(const TrainConfig& cfg, int T) {
  return static_cast<int>(std::lround(static_cast<double>(cfg.t_threshold) * T / 1000.0));
}

bool counting_applies(int t, int threshold, GateDirection dir) {
  return dir == GateDirection::below ? t < threshold : t > threshold;
}

Conditioning tag_dropout(const Conditioning& c, double ratio, int null_tag, Rng& rng) {
  Conditioning out = c;
  if (rng.bernoulli(ratio)) out.tag = null_tag;
  return out;
}

LossSettings loss_settings(const TrainConfig& cfg, int T) {
  return {cfg.lambda, effective_threshold(cfg, T), cfg.gate_direction, cfg.clamp_x0};
}

template <typename T>
double conditional_loss(const DenoiserParams<T>& p, const std::vector<TrainSample<T>>& batch, const NoiseSchedule& s) {
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  CounterParams<T> unused;
  return record(tape, p, bound, unused, batch, {}, 0.0, true, false, s).values.loss_c;
}

template <typename T>
double counting_regularizer(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                            const std::vector<TrainSample<T>>& batch, const NoiseSchedule& s, bool clamp_x0) {
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  return record(tape, p, bound, counter, batch, everyone(batch), 0.0, clamp_x0, true, s).values.loss_count;
}

template <typename T>
CombinedLoss combined_loss(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                           const std::vector<TrainSample<T>>& batch, const LossSettings& ls, const NoiseSchedule& s) {
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, nn::no_blocks());
  return record(tape, p, bound, counter, batch, gate(batch, ls), ls.lambda, ls.clamp_x0, true, s).values;
}

template <typename T>
CombinedGrad<T> combined_loss_gradients(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                                        const std::vector<TrainSample<T>>& batch, const LossSettings& ls,
                                        const NoiseSchedule& s, const nn::BlockFilter& trainable) {
  nn::Tape<T> tape;
  auto bound = p.params.bind(tape, trainable);
  Recorded<T> r = record(tape, p, bound, counter, batch, gate(batch, ls), ls.lambda, ls.clamp_x0, true, s);
  tape.backward(r.total);
  return {std::move(r.values), p.params.gradients(tape, bound)};
}

nlohmann::json to_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"stage", e.stage},
          {"loss_c", e.loss_c},
          {"loss_count", e.loss_count},
          {"loss_total", e.loss_total}};
}

DiffusionTrainResult train_diffusion(const std::vector<LabeledImage>& corpus, const CounterParams<float>& counter,
                                     const TrainConfig& cfg, const NoiseSchedule& schedule, const DenoiserArch& arch,
                                     const EpochCallback& on_epoch) {
  validate(cfg, schedule.T);
  if (corpus.empty()) throw ConfigError("train_diffusion: empty corpus");
  DiffusionTrainResult res{init_model(arch, derive_seed(cfg.seed, "init")), {}, {}, cfg.lambda};
  DenoiserParams<float>& p = res.params;

  float peak = 0.0f;
  for (const auto& it : corpus) {
    if (it.tag < 0 || it.tag >= arch.tags) throw BoundsError("train_diffusion: scene '" + it.id + "' has tag out of range");
    for (float v : it.density.values.values) peak = std::max(peak, v);
  }
  if (peak > 0.0f) p.dmap_scale = 1.0 / peak;

  const int T = schedule.T;
  auto draw_batch = [&](Rng& rng, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
    std::vector<TrainSample<float>> batch;
    for (std::size_t k = begin; k < end; ++k) {
      const LabeledImage& it = corpus[order[k]];
      TrainSample<float> smp;
      smp.x0 = it.image;
      smp.t = rng.uniform_int(1, T);
      smp.eps = ImageGrid(it.image.height, it.image.width);
      for (float& v : smp.eps.values) v = static_cast<float>(rng.normal());
      smp.cond = tag_dropout(Conditioning{it.tag, it.density}, cfg.dropout_ratio, arch.null_tag(), rng);
      smp.y_gt = it.density.values;
      batch.push_back(std::move(smp));
    }
    return batch;
  };
  auto shuffled = [&](Rng& rng) {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    }
    return order;
  };

  LossSettings ls = loss_settings(cfg, T);
  if (cfg.auto_lambda) {
    Rng rng(derive_seed(cfg.seed, "lambda"));
    double sum_c = 0.0, sum_n = 0.0;
    std::size_t n_c = 0, n_n = 0;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    for (int b = 0; b < cfg.auto_lambda_batches; ++b) {
      if (cursor >= order.size()) {
        order = shuffled(rng);
        cursor = 0;
      }
      const std::size_t end = std::min(order.size(), cursor + cfg.batch_size);
      const auto batch = draw_batch(rng, order, cursor, end);
      cursor = end;
      const CombinedLoss l = combined_loss(p, counter, batch, ls, schedule);
      sum_c += l.loss_c * batch.size();
      n_c += batch.size();
      for (double v : l.per_sample_count) sum_n += v;
      n_n += l.per_sample_count.size();
    }
    if (n_n > 0 && sum_n > 0.0) ls.lambda = (sum_c / n_c) / (sum_n / n_n);
  }
  res.lambda = ls.lambda;

  Rng rng(derive_seed(cfg.seed, "batches"));
  int epoch_index = 0;
  auto run_stage = [&](const std::string& stage, int epochs, const nn::BlockFilter& trainable, bool with_count) {
    nn::Adam<float> adam(p.params, cfg.learn_rate);
    for (int e = 0; e < epochs; ++e) {
      const auto order = shuffled(rng);
      EpochStats st{epoch_index++, stage, 0.0, 0.0, 0.0};
      for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
        const auto batch = draw_batch(rng, order, begin, end);
        nn::Tape<float> tape;
        auto bound = p.params.bind(tape, trainable);
        Recorded<float> r =
            record(tape, p, bound, counter, batch, gate(batch, ls), ls.lambda, ls.clamp_x0, with_count, schedule);
        tape.backward(r.total);
        adam.step(p.params, p.params.gradients(tape, bound), trainable);
        const double w = static_cast<double>(batch.size()) / order.size();
        st.loss_c += w * r.values.loss_c;
        st.loss_count += w * r.values.loss_count;
        st.loss_total += w * r.values.loss_total;
        res.step_loss.push_back(r.values.loss_total);
      }
      res.epochs.push_back(st);
      if (on_epoch) on_epoch(st);
    }
  };

  if (cfg.mode == TrainMode::frozen_base) {
    run_stage("pretrain", cfg.pretrain_epochs, trunk_blocks(), false);
    run_stage("control", cfg.epochs, trainable_blocks(TrainMode::frozen_base), true);
  } else {
    run_stage("joint", cfg.epochs, trainable_blocks(TrainMode::joint), true);
  }
  return res;
}

#define CDAUG_INSTANTIATE_TRAIN(T)                                                                                   \
  template double conditional_loss(const DenoiserParams<T>&, const std::vector<TrainSample<T>>&, const NoiseSchedule&); \
  template double counting_regularizer(const DenoiserParams<T>&, const CounterParams<T>&,                           \
                                       const std::vector<TrainSample<T>>&, const NoiseSchedule&, bool);             \
  template CombinedLoss combined_loss(const DenoiserParams<T>&, const CounterParams<T>&,                            \
                                      const std::vector<TrainSample<T>>&, const LossSettings&, const NoiseSchedule&); \
  template CombinedGrad<T> combined_loss_gradients(const DenoiserParams<T>&, const CounterParams<T>&,               \
                                                   const std::vector<TrainSample<T>>&, const LossSettings&,         \
                                                   const NoiseSchedule&, const nn::BlockFilter&);

CDAUG_INSTANTIATE_TRAIN(float)
CDAUG_INSTANTIATE_TRAIN(double)

#undef CDAUG_INSTANTIATE_TRAIN

}  // namespace cdaug
