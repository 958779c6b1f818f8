#pragma once

// Cell partitioning of density maps, batch measures and count metrics.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/io.hpp"
#include "cssccnn/measure.hpp"
#include "cssccnn/raster.hpp"

namespace cssccnn {

/// m x n cell counts, row-major (cell (r, c) at counts[r * n + c]).
struct CellGrid {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<double> counts;

  double at(std::size_t r, std::size_t c) const { return counts[r * n + c]; }
  double total() const {
    double s = 0.0;
    for (double v : counts) s += v;
    return s;
  }
};

namespace detail {

// Band b of `bands` over a dimension of length `len`; the last band absorbs the remainder.
inline std::pair<std::size_t, std::size_t> band(std::size_t len, std::size_t bands, std::size_t b) {
  const std::size_t step = len / bands;
  const std::size_t lo = b * step;
  const std::size_t hi = b + 1 == bands ? len : lo + step;
  return {lo, hi};
}

}  // namespace detail

template <class T>
CellGrid cells_from_density(const Raster<T>& d, std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) throw InvalidArgument("cells_from_density: grid must be at least 1x1");
  if (d.width < n || d.height < m) {
    throw InvalidArgument("cells_from_density: map " + std::to_string(d.width) + "x" +
                          std::to_string(d.height) + " smaller than grid " + std::to_string(m) +
                          "x" + std::to_string(n));
  }
  CellGrid g{m, n, std::vector<double>(m * n, 0.0)};
  for (std::size_t r = 0; r < m; ++r) {
    const auto [y0, y1] = detail::band(d.height, m, r);
    for (std::size_t c = 0; c < n; ++c) {
      const auto [x0, x1] = detail::band(d.width, n, c);
      double s = 0.0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) s += static_cast<double>(d.at(x, y));
      }
      g.counts[r * n + c] = s;
    }
  }
  return g;
}

/// Alternate parameterisation: square cells of `cell_side` pixels. Partial cells at the
/// right/bottom edges are merged into the last full band, as in cells_from_density.
template <class T>
CellGrid cells_by_size(const Raster<T>& d, std::size_t cell_side) {
  if (cell_side == 0) throw InvalidArgument("cells_by_size: cell side must be positive");
  const std::size_t m = d.height / cell_side, n = d.width / cell_side;
  if (m == 0 || n == 0) throw InvalidArgument("cells_by_size: map smaller than one cell");
  return cells_from_density(d, m, n);
}

inline EmpiricalMeasure batch_measure(const std::vector<CellGrid>& grids) {
  if (grids.empty()) throw InvalidArgument("batch_measure: no grids");
  std::vector<double> v;
  for (const auto& g : grids) v.insert(v.end(), g.counts.begin(), g.counts.end());
  return EmpiricalMeasure(std::move(v));
}

struct CountErrors {
  double mae = 0.0;
  /// Root of the mean squared error.
  double mse = 0.0;
};

inline CountErrors mae_mse(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw InvalidArgument("mae_mse: length mismatch");
  if (pred.empty()) throw InvalidArgument("mae_mse: no samples");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double s = static_cast<double>(pred.size());
  return {abs_sum / s, std::sqrt(sq_sum / s)};
}

// "DMAP", u32 width, u32 height, then row-major f32, all little-endian.
inline std::string encode_dmap(const DensityMap& d) {
  std::string buf = "DMAP";
  io::put_u32(buf, static_cast<std::uint32_t>(d.width));
  io::put_u32(buf, static_cast<std::uint32_t>(d.height));
  for (float v : d.data) io::put_f32(buf, v);
  return buf;
}

inline DensityMap decode_dmap(std::string_view bytes, const std::string& context = "DMAP") {
  io::Reader rd(bytes, context);
  if (rd.take(4) != "DMAP") throw IoError(context + ": bad magic");
  const std::uint32_t w = rd.u32(), h = rd.u32();
  DensityMap d(w, h);
  for (float& v : d.data) v = rd.f32();
  if (!rd.done()) throw IoError(context + ": trailing bytes");
  return d;
}

inline void write_dmap(const std::filesystem::path& p, const DensityMap& d) {
  io::write_file(p, encode_dmap(d));
}

inline DensityMap read_dmap(const std::filesystem::path& p) {
  return decode_dmap(io::read_file(p), p.string());
}

}  // namespace cssccnn
