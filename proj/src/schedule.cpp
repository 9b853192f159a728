#include "cdaug/schedule.hpp"

#include <cmath>
#include <string>

namespace cdaug {

namespace {

void require_step(const NoiseSchedule& s, int t, const char* what) {
  if (t < 1 || t > s.T) {
    throw BoundsError(std::string(what) + ": step " + std::to_string(t) + " outside 1.." + std::to_string(s.T));
  }
}

}  // namespace

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > T) throw BoundsError("step " + std::to_string(t) + " outside 0.." + std::to_string(T));
  return alpha_bar[t - 1];
}

double NoiseSchedule::sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar_at(t)); }

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

template <typename T>
Grid<T> forward_diffuse(const Grid<T>& x0, int t, const Grid<T>& eps, const NoiseSchedule& s) {
  require_same_shape(x0, eps, "forward_diffuse");
  require_step(s, t, "forward_diffuse");
  const double a = s.sqrt_alpha_bar(t);
  const double b = s.sqrt_one_minus_alpha_bar(t);
  Grid<T> out(x0.height, x0.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<T>(a * x0.values[i] + b * eps.values[i]);
  }
  return out;
}

template <typename T>
Grid<T> predict_x0(const Grid<T>& xt, int t, const Grid<T>& eps, const NoiseSchedule& s) {
  require_same_shape(xt, eps, "predict_x0");
  require_step(s, t, "predict_x0");
  const double a = s.sqrt_alpha_bar(t);
  const double b = s.sqrt_one_minus_alpha_bar(t);
  Grid<T> out(xt.height, xt.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.values[i] = static_cast<T>((xt.values[i] - b * eps.values[i]) / a);
  }
  return out;
}

template <typename T>
Grid<T> ddim_step(const Grid<T>& xt, const Grid<T>& eps, int t, int t_prev, const NoiseSchedule& s) {
  if (t_prev >= t || t_prev < 0) {
    throw OrderingError("ddim_step: need t > t_prev >= 0, got t=" + std::to_string(t) +
                        " t_prev=" + std::to_string(t_prev));
  }
  Grid<T> x0 = predict_x0(xt, t, eps, s);
  if (t_prev == 0) return x0;
  const double a = s.sqrt_alpha_bar(t_prev);
  const double b = s.sqrt_one_minus_alpha_bar(t_prev);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    x0.values[i] = static_cast<T>(a * x0.values[i] + b * eps.values[i]);
  }
  return x0;
}

std::vector<int> timestep_subsequence(int T, int steps) {
  if (steps < 1 || steps > T) {
    throw ConfigError("timestep_subsequence: need 1 <= steps <= T, got steps=" + std::to_string(steps) +
                      " T=" + std::to_string(T));
  }
  const int stride = T / steps;
  std::vector<int> seq(steps);
  for (int i = 0; i < steps; ++i) seq[i] = T - i * stride;
  return seq;
}

template Grid<float> forward_diffuse(const Grid<float>&, int, const Grid<float>&, const NoiseSchedule&);
template Grid<double> forward_diffuse(const Grid<double>&, int, const Grid<double>&, const NoiseSchedule&);
template Grid<float> predict_x0(const Grid<float>&, int, const Grid<float>&, const NoiseSchedule&);
template Grid<double> predict_x0(const Grid<double>&, int, const Grid<double>&, const NoiseSchedule&);
template Grid<float> ddim_step(const Grid<float>&, const Grid<float>&, int, int, const NoiseSchedule&);
template Grid<double> ddim_step(const Grid<double>&, const Grid<double>&, int, int, const NoiseSchedule&);

}  // namespace cdaug
