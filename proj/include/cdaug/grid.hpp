#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cdaug/errors.hpp"

namespace cdaug {

// Row-major single-channel grid with top-left origin. Pixel (row, col) has its
// center at continuous coordinate (x = col, y = row).
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T(0))
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return values.size(); }
  T& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
  const T& at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * width + col];
  }
  bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out(height, width);
    std::transform(values.begin(), values.end(), out.values.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using ImageGrid = Grid<float>;

template <typename T>
void require_same_shape(const Grid<T>& a, const Grid<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width));
  }
}

template <typename T>
T max_abs_diff(const Grid<T>& a, const Grid<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

}  // namespace cdaug
