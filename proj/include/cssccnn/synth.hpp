#pragma once

// Synthetic crowd scenes whose per-cell counts follow a given prior.
//
// An image is a tiles x tiles mosaic of square crops; each crop carries an m x n grid of
// cells. Every cell draws a target count from the prior, rounds it stochastically and
// scatters that many head-and-shoulder sprites inside the cell. The ground-truth density is
// rendered at 1/stride of the image resolution as unit-mass Gaussians, one per head.
//
// Cell draws within an image are tied together by a Gaussian copula so that whole images
// are sparse or dense, as crowd photos are. In the bimodal variant the copula latent is a
// two-point mixture per crop, splitting crops into sparse and dense groups while every
// cell's marginal remains exactly the prior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/grid.hpp"
#include "cssccnn/io.hpp"
#include "cssccnn/prior.hpp"
#include "cssccnn/raster.hpp"
#include "cssccnn/vision.hpp"

namespace cssccnn {

struct SceneSpec {
  std::size_t crop_size = 96;
  /// Crops per image side; S_crop = tiles^2.
  std::size_t tiles = 2;
  std::size_t grid_m = 3, grid_n = 3;
  std::size_t density_stride = 4;
  PriorSpec count_prior;
  double head_radius_min = 1.6;
  double head_radius_max = 4.5;
  double clutter_level = 0.5;
  /// Top-to-bottom brightness drop of the background, in grey levels.
  double illumination = 40.0;
  /// Gaussian width of one head in density-map pixels.
  double density_sigma = 1.0;
  /// Correlation of the per-cell copula latents within an image.
  double image_correlation = 0.5;
  bool bimodal = false;
  /// Separation of the two crop-level modes in the bimodal variant (in (0, 1)).
  double bimodal_separation = 0.95;

  std::size_t image_size() const { return crop_size * tiles; }
  std::size_t cells_per_image() const { return tiles * tiles * grid_m * grid_n; }

  void validate() const {
    count_prior.validate();
    if (crop_size == 0 || tiles == 0 || grid_m == 0 || grid_n == 0 || density_stride == 0) {
      throw InvalidArgument("SceneSpec: sizes must be positive");
    }
    if (crop_size % density_stride || crop_size % grid_m || crop_size % grid_n ||
        (crop_size / density_stride) % grid_m || (crop_size / density_stride) % grid_n) {
      throw InvalidArgument("SceneSpec: crop must divide evenly into stride-aligned cells");
    }
    if (!(clutter_level >= 0.0 && clutter_level <= 1.0)) {
      throw InvalidArgument("SceneSpec: clutter_level must lie in [0, 1]");
    }
    if (!(image_correlation >= 0.0 && image_correlation < 1.0)) {
      throw InvalidArgument("SceneSpec: image_correlation must lie in [0, 1)");
    }
    if (bimodal && !(bimodal_separation > 0.0 && bimodal_separation < 1.0)) {
      throw InvalidArgument("SceneSpec: bimodal_separation must lie in (0, 1)");
    }
    if (!(illumination >= 0.0)) throw InvalidArgument("SceneSpec: illumination must be >= 0");
    if (!(density_sigma > 0.0)) throw InvalidArgument("SceneSpec: density_sigma must be > 0");
  }
};

/// The standard desk-scale benchmark: 192-px images of four 96-px crops, a 3x3 grid per crop.
inline SceneSpec benchmark_spec(double c_fmax = 1200.0, double alpha = 2.0, double s_images = 300,
                                bool bimodal = false) {
  SceneSpec s;
  s.count_prior = make_prior(alpha, derive_cell_max(c_fmax, 3, 3, 4), s_images);
  s.bimodal = bimodal;
  return s;
}

struct SceneResult {
  GrayImage image;
  DensityMap density;
  /// Continuous prior draws per cell (image-level row-major grid), before rounding.
  std::vector<double> target_counts;
  /// Heads actually placed per cell.
  std::vector<int> placed_counts;
  std::size_t heads = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Smooth value noise: bilinear interpolation of a coarse random lattice.
inline FloatImage value_noise(std::size_t w, std::size_t h, std::size_t period, std::mt19937_64& rng) {
  const std::size_t gw = w / period + 2, gh = h / period + 2;
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> lattice(gw * gh);
  for (float& v : lattice) v = u(rng);
  FloatImage out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / period;
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const double ty = fy - y0, sy = ty * ty * (3 - 2 * ty);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / period;
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const double tx = fx - x0, sx = tx * tx * (3 - 2 * tx);
      const double a = lattice[y0 * gw + x0], b = lattice[y0 * gw + x0 + 1];
      const double c = lattice[(y0 + 1) * gw + x0], d = lattice[(y0 + 1) * gw + x0 + 1];
      out.at(x, y) = static_cast<float>((a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy);
    }
  }
  return out;
}

// Blend `shade` into the canvas with coverage given by a signed distance (negative inside),
// anti-aliased over one pixel.
inline void blend(FloatImage& canvas, std::ptrdiff_t x, std::ptrdiff_t y, double sd, float shade) {
  if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(canvas.width) ||
      y >= static_cast<std::ptrdiff_t>(canvas.height)) {
    return;
  }
  const double cover = std::clamp(0.5 - sd, 0.0, 1.0);
  if (cover <= 0.0) return;
  float& px = canvas.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  px = static_cast<float>(px * (1.0 - cover) + shade * cover);
}

// Head disc with a wider shoulder ellipse below it; the sprite is not invariant under any
// quarter turn.
inline void draw_person(FloatImage& canvas, double cx, double cy, double r, float head_shade,
                        float body_shade) {
  const double bx = cx, by = cy + 1.7 * r, brx = 1.8 * r, bry = 1.0 * r;
  for (auto y = static_cast<std::ptrdiff_t>(std::floor(by - bry - 1)); y <= by + bry + 1; ++y) {
    for (auto x = static_cast<std::ptrdiff_t>(std::floor(bx - brx - 1)); x <= bx + brx + 1; ++x) {
      const double dx = (x + 0.5 - bx) / brx, dy = (y + 0.5 - by) / bry;
      const double sd = (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(brx, bry);
      blend(canvas, x, y, sd, body_shade);
    }
  }
  for (auto y = static_cast<std::ptrdiff_t>(std::floor(cy - r - 1)); y <= cy + r + 1; ++y) {
    for (auto x = static_cast<std::ptrdiff_t>(std::floor(cx - r - 1)); x <= cx + r + 1; ++x) {
      const double sd = std::hypot(x + 0.5 - cx, y + 0.5 - cy) - r;
      blend(canvas, x, y, sd, head_shade);
    }
  }
}

// Adds one unit of mass as a Gaussian renormalised over the map, so mass is never lost at
// the borders.
inline void splat_gaussian(std::vector<double>& acc, std::size_t w, std::size_t h, double cx,
                           double cy, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const auto ix = static_cast<std::ptrdiff_t>(std::floor(cx)), iy = static_cast<std::ptrdiff_t>(std::floor(cy));
  double total = 0.0;
  std::vector<std::pair<std::size_t, double>> taps;
  for (std::ptrdiff_t y = iy - r; y <= iy + r; ++y) {
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
    for (std::ptrdiff_t x = ix - r; x <= ix + r; ++x) {
      if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double v = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma));
      taps.emplace_back(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x), v);
      total += v;
    }
  }
  for (const auto& [i, v] : taps) acc[i] += v / total;
}

}  // namespace detail

class SceneGenerator {
 public:
  explicit SceneGenerator(SceneSpec spec) : spec_(std::move(spec)), table_((spec_.validate(), spec_.count_prior)) {
    if (spec_.head_radius_max >= spec_.crop_size / 4.0 || spec_.head_radius_min <= 0.0 ||
        spec_.head_radius_min > spec_.head_radius_max) {
      throw GenerationFailure("head radius range must satisfy 0 < min <= max < crop_size / 4");
    }
    const double cell = static_cast<double>(spec_.crop_size) / std::max(spec_.grid_m, spec_.grid_n);
    if (cell < 2.0 * spec_.head_radius_min) {
      throw GenerationFailure("cells are too small to hold a single head");
    }
  }

  const SceneSpec& spec() const { return spec_; }
  const PriorTable& table() const { return table_; }

  SceneResult generate(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const std::size_t side = spec_.image_size();
    const std::size_t cm = spec_.tiles * spec_.grid_m, cn = spec_.tiles * spec_.grid_n;
    const double cell_h = static_cast<double>(side) / cm, cell_w = static_cast<double>(side) / cn;

    SceneResult res;
    res.target_counts = draw_targets(rng);
    res.placed_counts.assign(cm * cn, 0);

    // Background: illumination falling off towards the bottom, smooth clutter, line segments.
    FloatImage canvas(side, side);
    const auto low = detail::value_noise(side, side, 24, rng);
    const auto mid = detail::value_noise(side, side, 7, rng);
    const double clutter = spec_.clutter_level;
    const double base = 150.0 + 20.0 * (u01(rng) - 0.5);
    for (std::size_t y = 0; y < side; ++y) {
      const double light = spec_.illumination * (0.5 - static_cast<double>(y) / side);
      for (std::size_t x = 0; x < side; ++x) {
        canvas.at(x, y) = static_cast<float>(base + light + clutter * (35.0 * low.at(x, y) + 12.0 * mid.at(x, y)));
      }
    }
    const int segments = static_cast<int>(std::round(clutter * 14.0));
    for (int s = 0; s < segments; ++s) {
      const double x0 = u01(rng) * side, y0 = u01(rng) * side;
      const double ang = u01(rng) * 3.14159265358979323846, len = 10.0 + 30.0 * u01(rng);
      const float shade = static_cast<float>(60.0 + 150.0 * u01(rng));
      for (double t = 0.0; t <= len; t += 0.5) {
        detail::blend(canvas, static_cast<std::ptrdiff_t>(x0 + t * std::cos(ang)),
                      static_cast<std::ptrdiff_t>(y0 + t * std::sin(ang)), -1.0, shade);
      }
    }

    // People, placed cell by cell; denser cells get smaller sprites.
    struct Head {
      double x, y, r;
    };
    std::vector<Head> heads;
    for (std::size_t r = 0; r < cm; ++r) {
      for (std::size_t c = 0; c < cn; ++c) {
        const double target = res.target_counts[r * cn + c];
        int n = static_cast<int>(std::floor(target));
        if (u01(rng) < target - n) ++n;
        res.placed_counts[r * cn + c] = n;
        const double crowd = static_cast<double>(n) / (cell_h * cell_w) * 256.0;
        const double radius = std::clamp(spec_.head_radius_max / std::sqrt(1.0 + 0.35 * crowd),
                                         spec_.head_radius_min, spec_.head_radius_max);
        for (int k = 0; k < n; ++k) {
          const double jitter = 1.0 + 0.15 * (u01(rng) - 0.5);
          heads.push_back({(c + u01(rng)) * cell_w, (r + u01(rng)) * cell_h, radius * jitter});
        }
      }
    }
    // Painter's order by row so lower people overlap those behind them.
    std::stable_sort(heads.begin(), heads.end(), [](const Head& a, const Head& b) { return a.y < b.y; });
    for (const auto& h : heads) {
      const float head_shade = static_cast<float>(35.0 + 30.0 * u01(rng));
      const float body_shade = static_cast<float>(185.0 + 45.0 * u01(rng));
      detail::draw_person(canvas, h.x, h.y, h.r, head_shade, body_shade);
    }

    std::normal_distribution<double> grain(0.0, 5.0);
    res.image = GrayImage(side, side);
    for (std::size_t i = 0; i < canvas.size(); ++i) {
      res.image.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(canvas.data[i] + grain(rng)), 0L, 255L));
    }

    const std::size_t dw = side / spec_.density_stride;
    std::vector<double> acc(dw * dw, 0.0);
    const double s = static_cast<double>(spec_.density_stride);
    for (const auto& h : heads) detail::splat_gaussian(acc, dw, dw, h.x / s, h.y / s, spec_.density_sigma);
    res.density = DensityMap(dw, dw);
    for (std::size_t i = 0; i < acc.size(); ++i) res.density.data[i] = static_cast<float>(acc[i]);
    res.heads = heads.size();
    return res;
  }

  /// Continuous per-cell count draws of scene `seed`, identical to generate(seed).target_counts.
  std::vector<double> targets(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    return draw_targets(rng);
  }

 private:
  // Copula latents -> uniform -> prior quantile.
  std::vector<double> draw_targets(std::mt19937_64& rng) const {
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const std::size_t cm = spec_.tiles * spec_.grid_m, cn = spec_.tiles * spec_.grid_n;
    std::vector<double> targets(cm * cn, 0.0);

    const double rho = spec_.image_correlation;
    const double z_img = z(rng);
    std::vector<double> z_tile(spec_.tiles * spec_.tiles);
    for (double& t : z_tile) {
      if (spec_.bimodal) {
        const double d = spec_.bimodal_separation;
        t = (u01(rng) < 0.5 ? -d : d) + std::sqrt(1.0 - d * d) * z(rng);
      } else {
        t = z(rng);
      }
    }
    for (std::size_t r = 0; r < cm; ++r) {
      for (std::size_t c = 0; c < cn; ++c) {
        const std::size_t tile = (r / spec_.grid_m) * spec_.tiles + c / spec_.grid_n;
        double u;
        if (spec_.bimodal) {
          // Tile latent t has the two-point mixture law; the cell latent mixes it with a
          // fresh normal at weight rho. Its CDF is known in closed form.
          const double d = spec_.bimodal_separation;
          const double zc = std::sqrt(rho) * z_tile[tile] + std::sqrt(1.0 - rho) * z(rng);
          const double mu = std::sqrt(rho) * d, sd = std::sqrt(1.0 - rho * d * d);
          u = 0.5 * detail::normal_cdf((zc - mu) / sd) + 0.5 * detail::normal_cdf((zc + mu) / sd);
        } else {
          const double zc = std::sqrt(rho) * (0.6 * z_img + 0.8 * z_tile[tile]) + std::sqrt(1.0 - rho) * z(rng);
          u = detail::normal_cdf(zc);
        }
        u = std::clamp(u, 0.0, 1.0);
        targets[r * cn + c] = table_.mixture_quantile(u);
      }
    }

    return targets;
  }

  SceneSpec spec_;
  PriorTable table_;
};

inline SceneResult generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  return SceneGenerator(spec).generate(seed);
}

/// Seed of image `index` in a dataset generated with `seed`.
inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  return detail::splitmix64(detail::splitmix64(seed) ^ static_cast<std::uint64_t>(index));
}

// ---- manifest ----

struct ManifestRow {
  std::string image;
  std::string density;
  double count = 0.0;
  std::vector<double> cells;
};

struct Manifest {
  std::filesystem::path dir;
  std::size_t grid_m = 0, grid_n = 0;
  std::vector<ManifestRow> rows;

  std::filesystem::path image_path(std::size_t i) const { return dir / rows.at(i).image; }
  std::filesystem::path density_path(std::size_t i) const { return dir / rows.at(i).density; }
};

inline std::string manifest_header(std::size_t m, std::size_t n) {
  std::string h = "image,density,count";
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) h += ",c" + std::to_string(r) + std::to_string(c);
  }
  return h;
}

inline void write_manifest(const std::filesystem::path& p, const Manifest& m) {
  std::ostringstream out;
  out << manifest_header(m.grid_m, m.grid_n) << "\n";
  for (const auto& row : m.rows) {
    out << row.image << "," << row.density << "," << io::format_double(row.count);
    for (double c : row.cells) out << "," << io::format_double(c);
    out << "\n";
  }
  io::write_file(p, out.str());
}

inline Manifest read_manifest(const std::filesystem::path& p) {
  std::istringstream in(io::read_file(p));
  Manifest m;
  m.dir = p.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw IoError(p.string() + ": empty manifest");
  const auto header = io::split(io::trim(line), ',');
  if (header.size() < 3 || header[0] != "image" || header[1] != "density" || header[2] != "count") {
    throw IoError(p.string() + ": manifest header must start with image,density,count");
  }
  const std::size_t cells = header.size() - 3;
  // The header names cells c<r><c>; recover the grid from the last one.
  if (cells > 0) {
    const auto& last = header.back();
    if (last.size() != 3 || last[0] != 'c') throw IoError(p.string() + ": bad cell column " + last);
    m.grid_m = static_cast<std::size_t>(last[1] - '0') + 1;
    m.grid_n = static_cast<std::size_t>(last[2] - '0') + 1;
    if (m.grid_m * m.grid_n != cells) throw IoError(p.string() + ": cell columns do not form a grid");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, ',');
    if (f.size() != header.size()) {
      throw IoError(p.string() + ":" + std::to_string(lineno) + ": expected " +
                    std::to_string(header.size()) + " fields");
    }
    ManifestRow row{f[0], f[1], io::parse_double(f[2], p.string()), {}};
    for (std::size_t k = 3; k < f.size(); ++k) row.cells.push_back(io::parse_double(f[k], p.string()));
    m.rows.push_back(std::move(row));
  }
  return m;
}

/// Writes images/NNNNN.pgm, density/NNNNN.dmap and manifest.csv under `out_dir`.
/// Cell columns hold ground-truth density sums over the image-level cell grid.
inline Manifest generate_dataset(const SceneSpec& spec, std::size_t n_images, std::uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  const SceneGenerator gen(spec);
  Manifest m;
  m.dir = out_dir;
  m.grid_m = spec.tiles * spec.grid_m;
  m.grid_n = spec.tiles * spec.grid_n;
  if (m.grid_m > 10 || m.grid_n > 10) throw InvalidArgument("generate_dataset: at most 10x10 cells per image");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto scene = gen.generate(scene_seed(seed, i));
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", i);
    ManifestRow row;
    row.image = std::string("images/") + name + ".pgm";
    row.density = std::string("density/") + name + ".dmap";
    write_pgm(out_dir / row.image, scene.image);
    write_dmap(out_dir / row.density, scene.density);
    row.count = raster_sum(scene.density);
    row.cells = cells_from_density(scene.density, m.grid_m, m.grid_n).counts;
    m.rows.push_back(std::move(row));
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace cssccnn
