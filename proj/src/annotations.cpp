#include "cdaug/annotations.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>

namespace cdaug {

namespace {

constexpr int kQuantumBits = 20;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename Num>
bool parse_number(std::string_view s, Num& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

template <typename Num>
void parse_pair(std::string_view line, int line_no, Num& a, Num& b) {
  const auto comma = line.find(',');
  if (comma == std::string_view::npos || !parse_number(line.substr(0, comma), a) ||
      !parse_number(line.substr(comma + 1), b)) {
    throw ParseError("line " + std::to_string(line_no) + ": expected two comma-separated numbers, got \"" +
                     std::string(line) + "\"");
  }
}

std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void validate(const DotMap& dots) {
  if (dots.width <= 0 || dots.height <= 0) {
    throw BoundsError("scene dimensions must be positive, got " + std::to_string(dots.width) + "x" +
                      std::to_string(dots.height));
  }
  for (std::size_t i = 0; i < dots.points.size(); ++i) {
    const Point& p = dots.points[i];
    if (!(p.x >= 0.0 && p.x < dots.width && p.y >= 0.0 && p.y < dots.height)) {
      throw BoundsError("point " + std::to_string(i) + " (" + format_real(p.x) + "," + format_real(p.y) +
                        ") outside " + std::to_string(dots.width) + "x" + std::to_string(dots.height));
    }
  }
}

DotMap parse_dots(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  if (lines.empty()) throw ParseError("line 1: missing \"width,height\" header");

  DotMap dots;
  parse_pair(trim(lines[0]), 1, dots.width, dots.height);
  if (dots.width <= 0 || dots.height <= 0) {
    throw ParseError("line 1: dimensions must be positive");
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    Point p;
    parse_pair(trim(lines[i]), static_cast<int>(i + 1), p.x, p.y);
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw ParseError("line " + std::to_string(i + 1) + ": non-finite coordinate");
    }
    dots.points.push_back(p);
  }
  validate(dots);
  return dots;
}

std::string format_dots(const DotMap& dots) {
  std::string out = std::to_string(dots.width) + "," + std::to_string(dots.height) + "\n";
  for (const Point& p : dots.points) out += format_real(p.x) + "," + format_real(p.y) + "\n";
  return out;
}

int truncation_radius(double kernel_variance) {
  return static_cast<int>(std::ceil(3.0 * std::sqrt(kernel_variance)));
}

DensityMap render_density(const DotMap& dots, double kernel_variance) {
  if (!(kernel_variance > 0.0)) throw ConfigError("kernel_variance must be positive");
  validate(dots);
  const int radius = truncation_radius(kernel_variance);
  const double norm = 1.0 / (2.0 * std::numbers::pi * kernel_variance);
  const double scale = std::ldexp(1.0, kQuantumBits);

  std::vector<std::int64_t> acc(static_cast<std::size_t>(dots.width) * dots.height, 0);
  for (const Point& p : dots.points) {
    const int c0 = std::max(0, static_cast<int>(std::ceil(p.x - radius)));
    const int c1 = std::min(dots.width - 1, static_cast<int>(std::floor(p.x + radius)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(p.y - radius)));
    const int r1 = std::min(dots.height - 1, static_cast<int>(std::floor(p.y + radius)));
    for (int r = r0; r <= r1; ++r) {
      const double dy = r - p.y;
      for (int c = c0; c <= c1; ++c) {
        const double dx = c - p.x;
        const double g = norm * std::exp(-(dx * dx + dy * dy) / (2.0 * kernel_variance));
        acc[static_cast<std::size_t>(r) * dots.width + c] += std::llround(g * scale);
      }
    }
  }

  DensityMap map;
  map.kernel_variance = kernel_variance;
  map.values = Grid<float>(dots.height, dots.width);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    map.values.values[i] = std::ldexp(static_cast<float>(acc[i]), -kQuantumBits);
  }
  return map;
}

double total_count(const DensityMap& map) {
  double sum = 0.0;
  for (float v : map.values.values) sum += v;
  return sum;
}

Bytes write_density(const DensityMap& map) {
  ByteWriter w;
  w.raw("DMAP1");
  w.u32(static_cast<std::uint32_t>(map.width()));
  w.u32(static_cast<std::uint32_t>(map.height()));
  for (float v : map.values.values) w.f32(v);
  return w.take();
}

DensityMap read_density(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "density map");
  r.expect_magic("DMAP1");
  const std::uint32_t width = r.u32();
  const std::uint32_t height = r.u32();
  constexpr std::uint64_t kMaxSide = std::numeric_limits<int>::max();
  if (width == 0 || height == 0 || width > kMaxSide || height > kMaxSide) {
    throw FormatError("density map: invalid dimensions " + std::to_string(width) + "x" + std::to_string(height));
  }
  const std::uint64_t cells = static_cast<std::uint64_t>(width) * height;
  if (cells > r.remaining() / 4) {
    throw FormatError("density map: payload holds " + std::to_string(r.remaining()) + " bytes, " +
                      std::to_string(width) + "x" + std::to_string(height) + " needs " +
                      std::to_string(cells * 4));
  }
  DensityMap map;
  map.values = Grid<float>(static_cast<int>(height), static_cast<int>(width));
  for (float& v : map.values.values) v = r.f32();
  r.expect_end();
  return map;
}

Bytes write_pgm(const ImageGrid& image) {
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + image.size());
  for (float v : image.values) {
    const double b = std::round((static_cast<double>(v) + 1.0) * 0.5 * 255.0);
    out.push_back(static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0)));
  }
  return out;
}

ImageGrid read_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long v = 0;
    const std::size_t begin = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && v < 1'000'000'000L) v = v * 10 + (bytes[pos++] - '0');
    if (pos == begin) throw FormatError("pgm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("pgm: bad magic, expected P5");
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (width <= 0 || height <= 0 || width > 65535 || height > 65535) throw FormatError("pgm: invalid dimensions");
  if (maxval != 255) throw FormatError("pgm: only 8-bit images with maxval 255 are supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("pgm: malformed header");
  ++pos;
  const auto cells = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos != cells) throw FormatError("pgm: pixel payload size mismatch");
  ImageGrid image(static_cast<int>(height), static_cast<int>(width));
  for (std::size_t i = 0; i < cells; ++i) {
    image.values[i] = static_cast<float>(2.0 * (bytes[pos + i] / 255.0) - 1.0);
  }
  return image;
}

}  // namespace cdaug
