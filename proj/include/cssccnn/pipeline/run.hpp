#pragma once

// File-level orchestration shared by the CLI and the acceptance runner: turning manifests into
// cached crop sets, picking the labeled subset for semi mode, sweeps and raster dumps.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/checkpoint.hpp"
#include "cssccnn/pipeline/evaluate.hpp"

namespace cssccnn {

struct Stage2Data {
  CropSet train, val;
};

/// Crops of every image, frozen-FEN features, and (plus-plus) pseudo counts, split by image.
/// Takes an ImageSet, which has no way to reach annotations.
inline Stage2Data prepare_stage2(const ImageSet& images, const Net& fen, const RunConfig& cfg) {
  if (images.size() < 2) throw InvalidArgument("stage 2 needs at least two images (train and validation)");
  auto all = make_crops(images.images, cfg.crop_size);
  attach_features(all, fen);
  if (cfg.mode == TrainMode::PlusPlus) attach_pseudo_counts(all, cfg.grid_m, cfg.grid_n, cfg.canny_sigma, cfg.pseudo_blur);
  const auto split = split_indices(images.size(), cfg.val_fraction, cfg.seed);
  return {subset(all, split.train), subset(all, split.val)};
}

/// The first `k` training-side images of the split are the labeled ones, so growing k only
/// ever adds images.
inline std::vector<std::size_t> labeled_image_ids(std::size_t n_images, const RunConfig& cfg) {
  const auto split = split_indices(n_images, cfg.val_fraction, cfg.seed);
  if (cfg.labeled > split.train.size()) {
    throw InvalidArgument("asked for " + std::to_string(cfg.labeled) + " labeled images but only " +
                          std::to_string(split.train.size()) + " are on the training side");
  }
  return {split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(cfg.labeled)};
}

/// Per-crop features and true cell counts for the chosen images. Opens their density files.
inline LabeledCrops load_labeled_crops(const std::filesystem::path& manifest_path,
                                       const std::vector<std::size_t>& image_ids, const Net& fen,
                                       const RunConfig& cfg) {
  const auto m = read_manifest(manifest_path);
  LabeledCrops out;
  for (std::size_t i : image_ids) {
    if (i >= m.rows.size()) throw InvalidArgument("labeled image index outside the manifest");
    const auto img = read_pgm(m.image_path(i));
    const auto dens = read_dmap(m.density_path(i));
    if (img.width % dens.width || img.height % dens.height || img.width / dens.width != img.height / dens.height) {
      throw ShapeMismatch("density map of " + m.rows[i].image + " is not a whole-stride reduction of the image");
    }
    const std::size_t stride = img.width / dens.width;
    if (cfg.crop_size % stride) throw ShapeMismatch("crop size is not a multiple of the density stride");
    const std::size_t dc = cfg.crop_size / stride;
    for (const auto& [x, y] : tile_cover(img.width, img.height, cfg.crop_size)) {
      out.features.push_back(fen.features(crop(img, x, y, cfg.crop_size, cfg.crop_size)));
      out.cells.push_back(cells_from_density(crop(dens, x / stride, y / stride, dc, dc), cfg.grid_m, cfg.grid_n));
    }
  }
  return out;
}

struct TestData {
  CropSet crops;
  std::vector<double> gt;
};

/// Test crops with features plus the manifest's ground-truth counts (no density files).
inline TestData prepare_test(const std::filesystem::path& manifest_path, const Net& fen, const RunConfig& cfg) {
  const auto images = load_images(manifest_path);
  TestData t;
  t.crops = make_crops(images.images, cfg.crop_size);
  attach_features(t.crops, fen);
  t.gt = load_counts(manifest_path);
  return t;
}

/// Stage 2 in whichever mode `cfg` names, with the labeled subset drawn from `manifest_path`
/// when the mode is semi.
inline Stage2Result run_stage2(const Net& init, bool init_is_pretrained, const ImageSet& images,
                               const RunConfig& cfg, const std::filesystem::path& manifest_path = {},
                               const EpochCallback& on_epoch = {}) {
  const auto data = prepare_stage2(images, init, cfg);
  LabeledCrops labeled;
  if (cfg.mode == TrainMode::Semi && cfg.labeled > 0) {
    labeled = load_labeled_crops(manifest_path, labeled_image_ids(images.size(), cfg), init, cfg);
  }
  return train_stage2(init, init_is_pretrained, data.train, data.val, cfg, &labeled, on_epoch);
}

// ---- sweep ----

struct SweepRow {
  std::string parameter;
  double value = 0.0;
  CountErrors errors;
};

struct SweepReport {
  std::vector<SweepRow> rows;

  std::string csv() const {
    std::ostringstream s;
    s << "parameter,value,mae,mse\n";
    for (const auto& r : rows) {
      s << r.parameter << "," << io::format_double(r.value) << "," << io::format_double(r.errors.mae) << ","
        << io::format_double(r.errors.mse) << "\n";
    }
    return s.str();
  }

  /// (max MAE - min MAE) / mean MAE.
  double relative_spread() const {
    if (rows.empty()) return 0.0;
    double lo = rows[0].errors.mae, hi = lo, sum = 0.0;
    for (const auto& r : rows) {
      lo = std::min(lo, r.errors.mae);
      hi = std::max(hi, r.errors.mae);
      sum += r.errors.mae;
    }
    const double mean = sum / static_cast<double>(rows.size());
    return mean > 0.0 ? (hi - lo) / mean : 0.0;
  }
};

/// Retrains stage 2 once per value of `parameter` (c_fmax or alpha) from the same stage-1 net.
/// The crops are featurised once; only the prior changes between rows.
inline SweepReport sweep(const Net& stage1, const Stage2Data& data, const TestData& test, RunConfig cfg,
                         const std::string& parameter, const std::vector<double>& values) {
  if (parameter != "c_fmax" && parameter != "alpha") {
    throw InvalidArgument("sweep parameter must be c_fmax or alpha, got " + parameter);
  }
  SweepReport rep;
  for (double v : values) {
    cfg.set(parameter, io::format_double(v));
    const auto r = train_stage2(stage1, true, data.train, data.val, cfg);
    rep.rows.push_back({parameter, v, mae_mse(predict_image_counts(r.net, test.crops, test.gt.size()), test.gt)});
  }
  return rep;
}

// ---- raster dumps ----

/// Full-image density prediction, stitched from the crop cover at the network's output stride.
inline DensityMap predict_density_map(const Net& net, const GrayImage& img, std::size_t crop_size) {
  DensityMap out;
  for (const auto& [x, y] : tile_cover(img.width, img.height, crop_size)) {
    const auto t = net.forward_density(net.features(crop(img, x, y, crop_size, crop_size)));
    const auto w = static_cast<std::size_t>(t.out.w), h = static_cast<std::size_t>(t.out.h);
    const std::size_t stride = crop_size / w;
    if (out.empty()) out = DensityMap(img.width / stride, img.height / stride);
    for (std::size_t yy = 0; yy < h; ++yy) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out.at(x / stride + xx, y / stride + yy) = t.out.x(0, static_cast<Eigen::Index>(yy * w + xx));
      }
    }
  }
  return out;
}

/// Writes <stem>_block1.pgm .. _block3.pgm, each the channel-mean activation of one FEN block
/// stretched to 0..255. Returns the paths written.
inline std::vector<std::filesystem::path> dump_features(const Net& net, const GrayImage& img,
                                                        const std::filesystem::path& out_dir,
                                                        const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> paths;
  const auto maps = net.mean_feature_maps(img);
  for (std::size_t b = 0; b < maps.size(); ++b) {
    paths.push_back(out_dir / (stem + "_block" + std::to_string(b + 1) + ".pgm"));
    write_pgm(paths.back(), to_gray_minmax(maps[b]));
  }
  return paths;
}

/// Checkpoint metadata for a run of `stage` under `cfg`.
inline nn::CheckpointMeta run_meta(const std::string& stage, const RunConfig& cfg) {
  return {stage, cfg.seed, cfg.hash(), {}};
}

}  // namespace cssccnn
