#pragma once

#include <vector>

#include "cdaug/grid.hpp"

namespace cdaug {

// Variance schedule of the forward noising process. Sequences are indexed by
// step t in 1..T (element t-1); alpha_bar(0) is defined as 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double alpha_bar_at(int t) const;
  double sqrt_alpha_bar(int t) const;
  double sqrt_one_minus_alpha_bar(int t) const;
};

// Linear beta ramp from beta_start to beta_end inclusive.
NoiseSchedule build_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Grid<T> forward_diffuse(const Grid<T>& x0, int t, const Grid<T>& eps, const NoiseSchedule& s);

// Closed-form clean-image estimate (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t). Not clamped.
template <typename T>
Grid<T> predict_x0(const Grid<T>& xt, int t, const Grid<T>& eps, const NoiseSchedule& s);

// Deterministic DDIM transition t -> t_prev (eta = 0). t_prev == 0 yields the clean estimate.
template <typename T>
Grid<T> ddim_step(const Grid<T>& xt, const Grid<T>& eps, int t, int t_prev, const NoiseSchedule& s);

// Descending steps T, T - k, ..., with stride k = floor(T / steps); the sampler's
// last transition goes from the final entry to 0.
std::vector<int> timestep_subsequence(int T, int steps);

}  // namespace cdaug
