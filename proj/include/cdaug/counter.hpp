#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdaug/annotations.hpp"
#include "cdaug/grid.hpp"
#include "cdaug/nn/params.hpp"

namespace cdaug {

// Five same-resolution 3x3 conv layers: four hidden widths, then a one-channel
// density head with a nonnegative output.
struct CounterArch {
  std::array<int, 4> hidden{16, 32, 32, 16};
  friend bool operator==(const CounterArch&, const CounterArch&) = default;
};

template <typename T>
struct CounterParams {
  CounterArch arch;
  nn::ParamSet<T> params;

  template <typename U>
  CounterParams<U> cast() const {
    return CounterParams<U>{arch, params.template cast<U>()};
  }
};

// Hidden layers get seeded LeCun-normal weights; the head starts at zero, so
// an untrained counter predicts an all-zero map.
CounterParams<float> init_counter(const CounterArch& arch, std::uint64_t seed);

template <typename T>
nn::Var counter_forward(nn::Tape<T>& tape, const CounterParams<T>& p, const std::vector<nn::Var>& bound, nn::Var img);

template <typename T>
Grid<T> predict_density_grid(const CounterParams<T>& p, const Grid<T>& img);

DensityMap predict_density(const CounterParams<float>& p, const ImageGrid& img);

template <typename T>
double count(const CounterParams<T>& p, const Grid<T>& img);

// Squared Frobenius distance between y_gt and the predicted density of img.
template <typename T>
double counting_loss(const CounterParams<T>& p, const Grid<T>& img, const Grid<T>& y_gt);

// Gradient of counting_loss with respect to the image.
template <typename T>
Grid<T> counting_input_gradient(const CounterParams<T>& p, const Grid<T>& img, const Grid<T>& y_gt);

// "CNTR1", u8 version, 4 x u32 hidden widths, u64 parameter count, f32 parameters.
Bytes save_counter(const CounterParams<float>& p);
CounterParams<float> load_counter(std::span<const std::uint8_t> bytes);

struct LabeledImage {
  std::string id;
  ImageGrid image;
  DensityMap density;
  int count = 0;
  int tag = 0;
};

struct CounterTrainConfig {
  CounterArch arch;
  int epochs = 40;
  int batch_size = 8;
  double learn_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct CounterTrainResult {
  CounterParams<float> params;
  // Mean per-image loss of each epoch.
  std::vector<double> epoch_loss;
};

// Adam on the mean per-image counting loss, one shuffled pass over the corpus per epoch.
CounterTrainResult train_counter(const std::vector<LabeledImage>& corpus, const CounterTrainConfig& cfg);

// Same optimizer loop, but each epoch takes `draws_per_epoch` images from `next`.
CounterTrainResult train_counter_stream(const std::function<const LabeledImage&()>& next,
                                        std::size_t draws_per_epoch, const CounterTrainConfig& cfg);

// Ground-truth count range [lo, hi); hi < 0 means unbounded.
struct Stratum {
  int lo = 0;
  int hi = -1;
  bool contains(double n) const { return n >= lo && (hi < 0 || n < hi); }
};

std::vector<Stratum> default_strata();

struct StratumMetrics {
  Stratum range;
  std::size_t n = 0;
  double mae = 0.0;
  double mse = 0.0;
};

// mae = mean |pred - gt|; mse = sqrt(mean (pred - gt)^2), i.e. a root mean square.
struct Metrics {
  std::size_t n = 0;
  double mae = 0.0;
  double mse = 0.0;
  std::vector<StratumMetrics> per_stratum;
};

Metrics compute_metrics(std::span<const double> preds, std::span<const double> gts,
                        const std::vector<Stratum>& strata = default_strata());

Metrics evaluate(const CounterParams<float>& p, const std::vector<LabeledImage>& testset,
                 const std::vector<Stratum>& strata = default_strata());

nlohmann::json to_json(const Metrics& m);

}  // namespace cdaug
