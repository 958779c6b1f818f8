#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cssccnn/error.hpp"

namespace cssccnn {

/// Row-major 2-D grid of samples.
template <class T>
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, T fill = T{}) : width(w), height(h), data(w * h, fill) {}

  T& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  const T& at(std::size_t x, std::size_t y) const { return data[y * width + x]; }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  bool operator==(const Raster&) const = default;
};

/// 8-bit grayscale image.
using GrayImage = Raster<std::uint8_t>;

/// Non-negative density raster; its sum is a head count.
using DensityMap = Raster<float>;

template <class T>
double raster_sum(const Raster<T>& r) {
  double s = 0.0;
  for (const T& v : r.data) s += static_cast<double>(v);
  return s;
}

template <class T>
Raster<T> crop(const Raster<T>& src, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > src.width || y0 + h > src.height) {
    throw ShapeMismatch("crop window exceeds raster bounds");
  }
  Raster<T> out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out.at(x, y) = src.at(x0 + x, y0 + y);
  }
  return out;
}

template <class To, class From>
Raster<To> raster_cast(const Raster<From>& src) {
  Raster<To> out(src.width, src.height);
  for (std::size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
  return out;
}

}  // namespace cssccnn
