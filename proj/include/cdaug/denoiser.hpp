#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cdaug/annotations.hpp"
#include "cdaug/grid.hpp"
#include "cdaug/io.hpp"
#include "cdaug/nn/params.hpp"

namespace cdaug {

// Shape of the conditional noise predictor: a three-level encoder-decoder
// trunk (full, half and quarter resolution) plus a density-map control branch
// that mirrors the encoder and is fused back through 1x1 projections.
struct DenoiserArch {
  std::array<int, 3> widths{32, 64, 128};
  int groups = 8;
  int time_dim = 64;
  int emb_dim = 128;
  // Number of real scene tags K; tag index K is the null tag.
  int tags = 4;

  int null_tag() const { return tags; }
  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

void validate(const DenoiserArch& arch);

struct Conditioning {
  int tag = 0;
  DensityMap dmap;
};

enum class TrainMode { joint, frozen_base };

template <typename T>
struct DenoiserParams {
  DenoiserArch arch;
  nn::ParamSet<T> params;
  // Density maps are multiplied by this before entering the control branch.
  double dmap_scale = 1.0;

  template <typename U>
  DenoiserParams<U> cast() const {
    return DenoiserParams<U>{arch, params.template cast<U>(), dmap_scale};
  }
};

// Fusion projections (names starting with "fuse.") are zero; everything else
// is drawn from a generator seeded by `seed`.
DenoiserParams<float> init_model(const DenoiserArch& arch, std::uint64_t seed);

bool is_fusion_block(const std::string& name);

// Blocks updated by the optimizer in each mode.
nn::BlockFilter trainable_blocks(TrainMode mode);
// Trunk-only filter used to pretrain the trunk before freezing it.
nn::BlockFilter trunk_blocks();

// A batch in network layout. xt and dmap are (N, 1, H, W); dmap holds raw
// density values.
template <typename T>
struct DenoiserBatch {
  nn::Tensor<T> xt;
  std::vector<int> steps;
  std::vector<int> tags;
  nn::Tensor<T> dmap;

  int size() const { return xt.n; }
};

template <typename T>
DenoiserBatch<T> make_batch(const std::vector<Grid<T>>& xt, const std::vector<int>& steps,
                            const std::vector<Conditioning>& conds);

// Records the network on `tape` and returns the noise prediction (N, 1, H, W).
// `bound` comes from p.params.bind(tape, ...).
template <typename T>
nn::Var denoiser_forward(nn::Tape<T>& tape, const DenoiserParams<T>& p, const std::vector<nn::Var>& bound,
                         nn::Var xt, const std::vector<int>& steps, const std::vector<int>& tags, nn::Var dmap);

template <typename T>
Grid<T> predict_eps(const DenoiserParams<T>& p, const Grid<T>& xt, int t, const Conditioning& c);

template <typename T>
nn::Tensor<T> predict_eps_batch(const DenoiserParams<T>& p, const DenoiserBatch<T>& batch);

// Scalar objective assembled on the tape from the batch input and the
// network's noise prediction.
template <typename T>
using LossBuilder = std::function<nn::Var(nn::Tape<T>& tape, nn::Var xt, nn::Var eps_pred)>;

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  nn::ParamSet<T> grads;
};

// Gradients for every block; blocks rejected by `trainable` report exact zeros.
template <typename T>
LossAndGrad<T> loss_gradients(const DenoiserParams<T>& p, const DenoiserBatch<T>& batch,
                              const LossBuilder<T>& loss, const nn::BlockFilter& trainable = nn::all_blocks());

// Gradient of the scalar built by `loss` with respect to the network input x_t.
template <typename T>
Grid<T> input_gradient(const DenoiserParams<T>& p, const Grid<T>& xt, int t, const Conditioning& c,
                       const LossBuilder<T>& loss);

// Checkpoint: "DNSR1", u8 version, arch (7 x u32), f32 dmap scale, u64 parameter
// count, then every parameter block as f32 in creation order.
Bytes save_params(const DenoiserParams<float>& p);
DenoiserParams<float> load_params(std::span<const std::uint8_t> bytes);

}  // namespace cdaug
