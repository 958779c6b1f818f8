#pragma once

// Dataset access for training and evaluation.
//
// Two loaders exist on purpose. ImageSet reads the manifest's image column and the P5 files it
// names and nothing else; it is the only loader the label-free training paths receive. LabeledSet
// additionally opens the ground-truth density files and is used by evaluation and semi-supervised
// training only.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/grid.hpp"
#include "cssccnn/network.hpp"
#include "cssccnn/raster.hpp"
#include "cssccnn/synth.hpp"
#include "cssccnn/vision.hpp"

namespace cssccnn {

struct ImageSet {
  std::vector<std::string> names;
  std::vector<GrayImage> images;

  std::size_t size() const { return images.size(); }
};

inline ImageSet load_images(const std::filesystem::path& manifest_path) {
  const auto m = read_manifest(manifest_path);
  ImageSet s;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    s.names.push_back(m.rows[i].image);
    s.images.push_back(read_pgm(m.image_path(i)));
  }
  return s;
}

struct LabeledSet {
  ImageSet images;
  std::vector<DensityMap> density;
  std::vector<double> counts;
};

inline LabeledSet load_labeled(const std::filesystem::path& manifest_path) {
  const auto m = read_manifest(manifest_path);
  LabeledSet s;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    s.images.names.push_back(m.rows[i].image);
    s.images.images.push_back(read_pgm(m.image_path(i)));
    s.density.push_back(read_dmap(m.density_path(i)));
    s.counts.push_back(m.rows[i].count);
  }
  return s;
}

/// Ground-truth counts only, straight from the manifest's count column.
inline std::vector<double> load_counts(const std::filesystem::path& manifest_path) {
  const auto m = read_manifest(manifest_path);
  std::vector<double> c;
  for (const auto& r : m.rows) c.push_back(r.count);
  return c;
}

/// Deterministic train/validation split of `n` items; at least one item on each side when n >= 2.
struct Split {
  std::vector<std::size_t> train, val;
};

inline Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("cannot split an empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x5157u);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  else n_val = 0;
  Split s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

/// Top-left corners of the non-overlapping tiles covering an image (row-major); the cover is
/// what turns per-crop predictions into a full-image count.
inline std::vector<std::pair<std::size_t, std::size_t>> tile_cover(std::size_t w, std::size_t h,
                                                                  std::size_t tile) {
  if (tile == 0 || w % tile || h % tile) {
    throw ShapeMismatch("image " + std::to_string(w) + "x" + std::to_string(h) +
                        " is not an exact multiple of the crop size " + std::to_string(tile));
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t y = 0; y < h; y += tile) {
    for (std::size_t x = 0; x < w; x += tile) out.emplace_back(x, y);
  }
  return out;
}

/// Stage-2 crops with their frozen-FEN features. `image` maps each crop back to its source.
struct CropSet {
  std::vector<GrayImage> crops;
  std::vector<std::size_t> image;
  std::vector<nn::Features<float>> features;
  /// Edge-derived pseudo cell counts, filled by attach_pseudo_counts.
  std::vector<CellGrid> pseudo;

  std::size_t size() const { return crops.size(); }
};

inline CropSet make_crops(const std::vector<GrayImage>& images, std::size_t crop_size) {
  CropSet s;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& [x, y] : tile_cover(images[i].width, images[i].height, crop_size)) {
      s.crops.push_back(crop(images[i], x, y, crop_size, crop_size));
      s.image.push_back(i);
    }
  }
  return s;
}

inline void attach_features(CropSet& s, const nn::Network<float>& net) {
  s.features.clear();
  s.features.reserve(s.crops.size());
  for (const auto& c : s.crops) s.features.push_back(net.features(c));
}

inline void attach_pseudo_counts(CropSet& s, std::size_t m, std::size_t n, double canny_sigma,
                                 double blur_sigma) {
  CannyOptions opt;
  opt.sigma = canny_sigma;
  s.pseudo.clear();
  for (const auto& c : s.crops) {
    const auto edges = canny(c, opt);
    s.pseudo.push_back(pseudo_density(edges, blur_sigma, c.width, c.height, m, n).pseudo_counts);
  }
}

inline CropSet subset(const CropSet& s, const std::vector<std::size_t>& image_ids) {
  CropSet out;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!std::binary_search(image_ids.begin(), image_ids.end(), s.image[k])) continue;
    out.crops.push_back(s.crops[k]);
    out.image.push_back(s.image[k]);
    if (!s.features.empty()) out.features.push_back(s.features[k]);
    if (!s.pseudo.empty()) out.pseudo.push_back(s.pseudo[k]);
  }
  return out;
}

}  // namespace cssccnn
