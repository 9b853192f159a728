#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "cdaug/counter.hpp"
#include "cdaug/denoiser.hpp"
#include "cdaug/rng.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("cdaug-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Under 5,000 parameters; images must be multiples of 4 on each side.
inline cdaug::DenoiserArch tiny_arch() {
  cdaug::DenoiserArch a;
  a.widths = {4, 4, 4};
  a.groups = 2;
  a.time_dim = 4;
  a.emb_dim = 4;
  a.tags = 2;
  return a;
}

inline cdaug::CounterArch tiny_counter_arch() { return {{3, 3, 3, 3}}; }

// Random weights everywhere, fusion layers and the counter head included, so
// that every path carries gradient.
inline cdaug::DenoiserParams<double> dense_tiny_model(std::uint64_t seed) {
  auto p = cdaug::init_model(tiny_arch(), seed).cast<double>();
  cdaug::Rng rng(seed ^ 0x5eed);
  for (auto& b : p.params.blocks())
    for (double& v : b.values) v += 0.3 * rng.normal();
  return p;
}

inline cdaug::CounterParams<double> dense_tiny_counter(std::uint64_t seed) {
  auto c = cdaug::init_counter(tiny_counter_arch(), seed).cast<double>();
  cdaug::Rng rng(seed ^ 0xc0de);
  for (auto& b : c.params.blocks()) {
    const bool head = b.name.rfind("head", 0) == 0;
    for (double& v : b.values) v = head && b.name.ends_with(".b") ? 0.5 : v + 0.3 * rng.normal();
  }
  return c;
}

template <typename T>
cdaug::Grid<T> random_grid(int h, int w, cdaug::Rng& rng, double lo = -1.0, double hi = 1.0) {
  cdaug::Grid<T> g(h, w);
  for (T& v : g.values) v = static_cast<T>(rng.uniform(lo, hi));
  return g;
}

// |a - b| / max(|a|, |b|, floor)
inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_difference(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace testing
