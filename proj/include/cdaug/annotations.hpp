#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdaug/grid.hpp"
#include "cdaug/io.hpp"

namespace cdaug {

inline constexpr double kDefaultKernelVariance = 4.0;

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// Object centers of one scene plus the scene size. Every point lies inside
// [0, width) x [0, height).
struct DotMap {
  std::vector<Point> points;
  int width = 0;
  int height = 0;

  std::size_t count() const { return points.size(); }
  friend bool operator==(const DotMap&, const DotMap&) = default;
};

struct DensityMap {
  Grid<float> values;
  double kernel_variance = kDefaultKernelVariance;

  int width() const { return values.width; }
  int height() const { return values.height; }
};

// Throws BoundsError if a point falls outside the scene or a dimension is not positive.
void validate(const DotMap& dots);

// "W,H" header line, then one "x,y" line per point, LF terminated.
DotMap parse_dots(std::string_view text);
std::string format_dots(const DotMap& dots);

// Half-width in pixels of the square window each kernel is evaluated on.
int truncation_radius(double kernel_variance);

// Sum of isotropic Gaussians N(p | dot, kernel_variance * I) sampled at pixel
// centers within the truncation window of each dot. Kernel samples are rounded
// to a 2^-20 lattice and accumulated in integers, so the map is exactly linear
// in its dot set and exactly covariant under integer shifts.
DensityMap render_density(const DotMap& dots, double kernel_variance = kDefaultKernelVariance);

double total_count(const DensityMap& map);

// "DMAP1", u32 width, u32 height, height*width f32 values (all little-endian, row-major).
Bytes write_density(const DensityMap& map);
// The format does not carry the kernel variance; the default is assumed.
DensityMap read_density(std::span<const std::uint8_t> bytes);

// 8-bit binary PGM (P5). Pixel bytes map to [-1, 1] via 2 * (byte / 255) - 1.
Bytes write_pgm(const ImageGrid& image);
ImageGrid read_pgm(std::span<const std::uint8_t> bytes);

}  // namespace cdaug
