#pragma once

// Grayscale image plumbing, right-angle rotations, Canny edges and the edge-derived
// pseudo-density used to split cells into sparse and dense groups.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/grid.hpp"
#include "cssccnn/io.hpp"
#include "cssccnn/raster.hpp"

namespace cssccnn {

using FloatImage = Raster<float>;

// ---- P5 (binary portable graymap) ----

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

inline GrayImage decode_pgm(std::string_view bytes, const std::string& context = "P5") {
  std::size_t pos = 0;
  // Header tokens are separated by whitespace; '#' starts a comment running to end of line.
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P5") throw IoError(context + ": not a binary graymap");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(context + ": malformed header");
  }
  if (w == 0 || h == 0) throw IoError(context + ": empty image");
  if (maxval != 255) throw IoError(context + ": only 8-bit graymaps are supported");
  ++pos;  // single whitespace byte before the raster
  if (pos + w * h > bytes.size()) throw IoError(context + ": truncated raster");
  GrayImage img(w, h);
  std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), w * h, img.data.begin());
  return img;
}

inline void write_pgm(const std::filesystem::path& p, const GrayImage& img) {
  io::write_file(p, encode_pgm(img));
}

inline GrayImage read_pgm(const std::filesystem::path& p) {
  return decode_pgm(io::read_file(p), p.string());
}

/// Min-max normalisation to 0..255; a constant raster maps to all zeros.
inline GrayImage to_gray_minmax(const FloatImage& f) {
  GrayImage out(f.width, f.height);
  if (f.empty()) return out;
  const auto [lo, hi] = std::minmax_element(f.data.begin(), f.data.end());
  const float range = *hi - *lo;
  if (!(range > 0.0f)) return out;
  for (std::size_t i = 0; i < f.size(); ++i) {
    out.data[i] = static_cast<std::uint8_t>(std::lround(255.0f * (f.data[i] - *lo) / range));
  }
  return out;
}

// ---- geometry ----

/// Counter-clockwise rotation by k quarter turns.
template <class T>
Raster<T> rotate90(const Raster<T>& img, int k) {
  if (k < 0 || k > 3) throw InvalidArgument("rotate90: k must be in {0,1,2,3}");
  if (k == 0) return img;
  const std::size_t w = img.width, h = img.height;
  Raster<T> out = (k == 2) ? Raster<T>(w, h) : Raster<T>(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T v = img.at(x, y);
      switch (k) {
        case 1: out.at(y, w - 1 - x) = v; break;
        case 2: out.at(w - 1 - x, h - 1 - y) = v; break;
        default: out.at(h - 1 - y, x) = v; break;
      }
    }
  }
  return out;
}

// ---- filtering ----

inline std::vector<float> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("gaussian_kernel: sigma must be > 0");
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += (k[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma))));
  for (float& v : k) v = static_cast<float>(v / s);
  return k;
}

namespace detail {

inline std::ptrdiff_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

}  // namespace detail

/// Separable Gaussian blur with symmetric (edge-repeating) borders.
inline FloatImage gaussian_blur(const FloatImage& src, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto w = static_cast<std::ptrdiff_t>(src.width), h = static_cast<std::ptrdiff_t>(src.height);
  FloatImage tmp(src.width, src.height), out(src.width, src.height);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      float s = 0.0f;
      for (std::ptrdiff_t d = -r; d <= r; ++d) s += k[d + r] * src.data[y * w + detail::reflect(x + d, w)];
      tmp.data[y * w + x] = s;
    }
  }
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      float s = 0.0f;
      for (std::ptrdiff_t d = -r; d <= r; ++d) s += k[d + r] * tmp.data[detail::reflect(y + d, h) * w + x];
      out.data[y * w + x] = s;
    }
  }
  return out;
}

/// Mass-preserving area resampling: each output pixel receives the source mass that falls
/// inside its footprint (fractional overlaps split proportionally).
inline FloatImage area_resample(const FloatImage& src, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw InvalidArgument("area_resample: empty output");
  // 1-D overlap weights: weight[o] lists (source index, fraction of that source pixel).
  auto weights = [](std::size_t n_in, std::size_t n_out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> wts(n_out);
    const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double lo = o * scale, hi = (o + 1) * scale;
      for (auto i = static_cast<std::size_t>(lo); i < n_in && static_cast<double>(i) < hi; ++i) {
        const double f = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
        if (f > 0.0) wts[o].emplace_back(i, f);
      }
    }
    return wts;
  };
  const auto wx = weights(src.width, out_w), wy = weights(src.height, out_h);
  FloatImage out(out_w, out_h);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double s = 0.0;
      for (const auto& [iy, fy] : wy[oy]) {
        for (const auto& [ix, fx] : wx[ox]) s += fy * fx * src.at(ix, iy);
      }
      out.at(ox, oy) = static_cast<float>(s);
    }
  }
  return out;
}

// ---- Canny ----

struct CannyOptions {
  double sigma = 1.4;
  /// Hysteresis thresholds; fractions of the largest gradient magnitude when `relative`.
  double low = 0.1;
  double high = 0.25;
  bool relative = true;
};

/// Binary edge raster (values 0/1).
inline GrayImage canny(const GrayImage& img, const CannyOptions& opt = {}) {
  if (!(opt.low > 0.0) || opt.high < opt.low) {
    throw InvalidArgument("canny: thresholds must satisfy high >= low > 0");
  }
  const auto w = static_cast<std::ptrdiff_t>(img.width), h = static_cast<std::ptrdiff_t>(img.height);
  const FloatImage smooth = gaussian_blur(raster_cast<float>(img), opt.sigma);
  auto px = [&](std::ptrdiff_t x, std::ptrdiff_t y) {
    return smooth.data[detail::reflect(y, h) * w + detail::reflect(x, w)];
  };

  std::vector<float> mag(img.size()), gx(img.size()), gy(img.size());
  float peak = 0.0f;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const float sx = (px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)) -
                       (px(x - 1, y - 1) + 2 * px(x - 1, y) + px(x - 1, y + 1));
      const float sy = (px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)) -
                       (px(x - 1, y - 1) + 2 * px(x, y - 1) + px(x + 1, y - 1));
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      gx[i] = sx;
      gy[i] = sy;
      mag[i] = std::hypot(sx, sy);
      peak = std::max(peak, mag[i]);
    }
  }
  GrayImage edges(img.width, img.height);
  // Anything below a float-noise floor is a flat image.
  if (!(peak > 1e-3f)) return edges;
  const double lo = opt.relative ? opt.low * peak : opt.low;
  const double hi = opt.relative ? opt.high * peak : opt.high;

  // Non-maximum suppression along the gradient direction quantised to 4 sectors.
  // A pixel survives if strictly above its predecessor and not below its successor, which
  // keeps exactly one pixel of a symmetric two-pixel ridge.
  std::vector<float> thin(img.size(), 0.0f);
  auto mag_at = [&](std::ptrdiff_t x, std::ptrdiff_t y) {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0f;
    return mag[static_cast<std::size_t>(y * w + x)];
  };
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      const float m = mag[i];
      if (m < lo) continue;
      double angle = std::atan2(gy[i], gx[i]) * 180.0 / 3.14159265358979323846;
      if (angle < 0) angle += 180.0;
      std::ptrdiff_t dx = 0, dy = 0;
      if (angle < 22.5 || angle >= 157.5) {
        dx = 1;
      } else if (angle < 67.5) {
        dx = 1;
        dy = 1;
      } else if (angle < 112.5) {
        dy = 1;
      } else {
        dx = -1;
        dy = 1;
      }
      if (m > mag_at(x - dx, y - dy) && m >= mag_at(x + dx, y + dy)) thin[i] = m;
    }
  }

  // Hysteresis: grow 8-connected from strong pixels through weak ones.
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < thin.size(); ++i) {
    if (thin[i] >= hi) {
      edges.data[i] = 1;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const auto x = static_cast<std::ptrdiff_t>(i) % w, y = static_cast<std::ptrdiff_t>(i) / w;
    for (std::ptrdiff_t ny = y - 1; ny <= y + 1; ++ny) {
      for (std::ptrdiff_t nx = x - 1; nx <= x + 1; ++nx) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const auto j = static_cast<std::size_t>(ny * w + nx);
        if (!edges.data[j] && thin[j] >= lo) {
          edges.data[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return edges;
}

// ---- pseudo-density ----

struct PseudoDensity {
  FloatImage map;
  CellGrid pseudo_counts;
};

inline PseudoDensity pseudo_density(const GrayImage& edges, double blur_sigma, std::size_t out_w,
                                    std::size_t out_h, std::size_t m = 3, std::size_t n = 3) {
  if (out_w > edges.width || out_h > edges.height) {
    throw InvalidArgument("pseudo_density: output larger than edge raster");
  }
  FloatImage e(edges.width, edges.height);
  for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = edges.data[i] ? 1.0f : 0.0f;
  PseudoDensity out;
  out.map = area_resample(gaussian_blur(e, blur_sigma), out_w, out_h);
  out.pseudo_counts = cells_from_density(out.map, m, n);
  return out;
}

/// Labels the lowest round(p * d / 100) values 0 (sparse) and the rest 1 (dense).
/// Ties keep input order, so equal values fill the sparse group front to back.
inline std::vector<std::uint8_t> group_by_percentile(std::span<const double> values,
                                                     double percentile = 30.0) {
  if (values.empty()) throw InvalidArgument("group_by_percentile: no samples");
  if (!(percentile >= 0.0 && percentile <= 100.0)) {
    throw InvalidArgument("group_by_percentile: percentile must lie in [0, 100]");
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const auto sparse = static_cast<std::size_t>(
      std::llround(percentile * static_cast<double>(values.size()) / 100.0));
  std::vector<std::uint8_t> labels(values.size(), 1);
  for (std::size_t r = 0; r < sparse; ++r) labels[order[r]] = 0;
  return labels;
}

}  // namespace cssccnn
