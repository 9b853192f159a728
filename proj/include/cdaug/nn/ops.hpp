#pragma once

#include <vector>

#include "cdaug/nn/tape.hpp"

namespace cdaug::nn {

// Same-size 2-D convolution. w is (Cout, Cin, k, k) with odd k, b is (Cout, 1, 1, 1).
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b);

// x (N, Din, 1, 1), w (Dout, Din, 1, 1), b (Dout, 1, 1, 1).
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b);

template <typename T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups);

template <typename T>
Var silu(Tape<T>& tape, Var x);

// Passes gradient where x >= 0, so a zero-initialized layer still trains.
template <typename T>
Var relu(Tape<T>& tape, Var x);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

// Elementwise product of equal shapes.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

// x (N, C, H, W) plus e (N, C, 1, 1) broadcast over the plane.
template <typename T>
Var add_channel_bias(Tape<T>& tape, Var x, Var e);

template <typename T>
Var avg_pool2(Tape<T>& tape, Var x);

// Mean over each plane: (N, C, H, W) -> (N, C, 1, 1).
template <typename T>
Var spatial_mean(Tape<T>& tape, Var x);

// Nearest-neighbour 2x upsampling.
template <typename T>
Var upsample2(Tape<T>& tape, Var x);

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);

// out[n] = ca[n] * a[n] + cb[n] * b[n]
template <typename T>
Var per_sample_affine(Tape<T>& tape, Var a, Var b, std::vector<T> ca, std::vector<T> cb);

// Gradient passes only strictly inside (lo, hi).
template <typename T>
Var clamp(Tape<T>& tape, Var x, T lo, T hi);

template <typename T>
Var select_samples(Tape<T>& tape, Var x, std::vector<int> indices);

// Per-sample sum of squared differences, shape (N, 1, 1, 1).
template <typename T>
Var sq_diff_per_sample(Tape<T>& tape, Var a, Var b);

// Scalar sum_n weights[n] * v[n] for v of shape (N, 1, 1, 1).
template <typename T>
Var weighted_sum(Tape<T>& tape, Var v, std::vector<T> weights);

// Rows of table (K, D, 1, 1); a negative row index yields a zero vector.
template <typename T>
Var embed_rows(Tape<T>& tape, Var table, std::vector<int> rows);

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);

}  // namespace cdaug::nn
