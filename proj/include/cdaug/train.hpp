#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"

#include "cdaug/counter.hpp"
#include "cdaug/denoiser.hpp"
#include "cdaug/rng.hpp"
#include "cdaug/schedule.hpp"

namespace cdaug {

// Which side of the threshold receives the counting term. `below` adds it for
// t < threshold (small noise, clean reconstructions); `above` for t > threshold.
enum class GateDirection { below, above };

struct TrainConfig {
  double lambda = 1e-3;
  // Replace lambda by mean(L_c) / mean(L_count) measured over warm-up batches.
  bool auto_lambda = false;
  int auto_lambda_batches = 100;
  // Expressed for a 1000-step schedule and rescaled proportionally for other T.
  int t_threshold = 400;
  double learn_rate = 2e-5;
  double dropout_ratio = 0.2;
  int epochs = 10;
  // Trunk-only epochs run before the control branch is trained in frozen-base mode.
  int pretrain_epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::joint;
  GateDirection gate_direction = GateDirection::below;
  bool clamp_x0 = true;
};

void validate(const TrainConfig& cfg, int T);

// Threshold on the schedule's own step scale.
int effective_threshold(const TrainConfig& cfg, int T);
bool counting_applies(int t, int threshold, GateDirection dir);

// With probability `ratio` the tag becomes `null_tag`; the density map is untouched.
Conditioning tag_dropout(const Conditioning& c, double ratio, int null_tag, Rng& rng);

template <typename T>
struct TrainSample {
  Grid<T> x0;
  int t = 1;
  Grid<T> eps;
  Conditioning cond;
  Grid<T> y_gt;
};

struct LossSettings {
  double lambda = 0.0;
  int threshold = 400;
  GateDirection gate_direction = GateDirection::below;
  bool clamp_x0 = true;
};

LossSettings loss_settings(const TrainConfig& cfg, int T);

// Values of one batch objective. Per-sample terms are summed over pixels and
// averaged over the batch; loss_count already includes the gate (ungated
// samples contribute 0), so loss_total = loss_c + lambda * loss_count.
struct CombinedLoss {
  double loss_c = 0.0;
  double loss_count = 0.0;
  double loss_total = 0.0;
  // Samples whose counting term was applied.
  std::vector<int> gated;
  std::size_t ungated = 0;
  // Per-sample counting term for gated samples, in `gated` order.
  std::vector<double> per_sample_count;
};

// Batch mean of ||eps - predict_eps(x_t, t, c)||^2.
template <typename T>
double conditional_loss(const DenoiserParams<T>& p, const std::vector<TrainSample<T>>& batch, const NoiseSchedule& s);

// Batch mean of the counting loss of the clamped clean estimate formed from the
// model's own noise prediction, ungated.
template <typename T>
double counting_regularizer(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                            const std::vector<TrainSample<T>>& batch, const NoiseSchedule& s, bool clamp_x0 = true);

template <typename T>
CombinedLoss combined_loss(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                           const std::vector<TrainSample<T>>& batch, const LossSettings& ls, const NoiseSchedule& s);

template <typename T>
struct CombinedGrad {
  CombinedLoss loss;
  nn::ParamSet<T> grads;
};

// Gradient of loss_total with respect to the denoiser blocks accepted by
// `trainable`; the counter is held fixed.
template <typename T>
CombinedGrad<T> combined_loss_gradients(const DenoiserParams<T>& p, const CounterParams<T>& counter,
                                        const std::vector<TrainSample<T>>& batch, const LossSettings& ls,
                                        const NoiseSchedule& s, const nn::BlockFilter& trainable = nn::all_blocks());

struct EpochStats {
  // 0-based; in frozen-base mode pretraining epochs come first with stage "pretrain".
  int epoch = 0;
  std::string stage;
  double loss_c = 0.0;
  double loss_count = 0.0;
  double loss_total = 0.0;
};

nlohmann::json to_json(const EpochStats& e);

struct DiffusionTrainResult {
  DenoiserParams<float> params;
  std::vector<EpochStats> epochs;
  // loss_total of every optimizer step in order.
  std::vector<double> step_loss;
  double lambda = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Adam over shuffled minibatches; every sample draws its own t uniformly from
// 1..T, its own noise and its own tag dropout. Fully determined by cfg.seed.
DiffusionTrainResult train_diffusion(const std::vector<LabeledImage>& corpus,
                                     const CounterParams<float>& counter, const TrainConfig& cfg,
                                     const NoiseSchedule& schedule, const DenoiserArch& arch = {},
                                     const EpochCallback& on_epoch = {});

}  // namespace cdaug
