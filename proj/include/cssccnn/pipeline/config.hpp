#pragma once

// Run configuration: a flat key=value file, overridable key by key from the command line.
// The seed falls back to $CSSCCNN_SEED when neither the file nor a flag sets it.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/io.hpp"
#include "cssccnn/prior.hpp"

namespace cssccnn {

enum class TrainMode { Plain, PlusPlus, Semi };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Plain: return "plain";
    case TrainMode::PlusPlus: return "plus-plus";
    case TrainMode::Semi: return "semi";
  }
  return "?";
}

struct RunConfig {
  std::string manifest;
  std::string test_manifest;
  std::string out_dir = "runs";

  // Prior.
  double alpha = 2.0;
  double c_fmax = 1200.0;
  double s_crop = 4;
  std::size_t grid_m = 3, grid_n = 3;
  double s_images = 300;
  double head_mass = 0.30;

  std::size_t crop_size = 96;
  double val_fraction = 0.10;

  // Stage 1.
  std::size_t stage1_crop = 112;
  std::size_t stage1_epochs = 30;
  std::size_t stage1_patience = 4;
  std::size_t stage1_crops_per_image = 4;
  std::size_t stage1_batch = 2;
  double stage1_lr = 3e-3;

  // Stage 2.
  double beta = 300.0;
  std::size_t batch_size = 32;
  std::size_t stage2_epochs = 60;
  std::size_t stage2_patience = 20;
  double stage2_lr = 1e-3;
  /// Re-initialise the density head from the unlabeled crops before stage 2 (non-negative
  /// weights, unit-RMS hidden units, mean cell count equal to the prior mean).
  bool calibrate_head = true;
  double momentum = 0.9;
  /// Global gradient-norm cap for both stages (0 disables).
  double grad_clip = 1.0;
  std::size_t sinkhorn_iters = 500;

  // Plus-plus grouping.
  double sparse_percentile = 30.0;
  double canny_sigma = 1.4;
  double pseudo_blur = 2.0;

  // Semi-supervised mode.
  TrainMode mode = TrainMode::Plain;
  std::size_t labeled = 0;
  std::size_t ratio_unlabeled = 5, ratio_labeled = 1;
  bool diagonal_labeled = false;
  /// Regularisation of the labeled-batch transport; 0 means "same as beta".
  double labeled_beta = 1000.0;
  bool labeled_per_crop = true;

  bool allow_random_fen = false;
  /// Untrained heads averaged into the Random baseline.
  std::size_t random_heads = 5;
  std::uint64_t seed = 0;
  bool seed_set = false;

  PriorSpec prior() const {
    return make_prior(alpha, derive_cell_max(c_fmax, static_cast<double>(grid_m),
                                             static_cast<double>(grid_n), s_crop),
                      s_images, head_mass);
  }

  double c_max_cell() const {
    return derive_cell_max(c_fmax, static_cast<double>(grid_m), static_cast<double>(grid_n), s_crop);
  }

  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0)) throw InvalidArgument(std::string("config: ") + what + " must be positive");
    };
    positive(alpha, "alpha");
    positive(c_fmax, "c_fmax");
    positive(s_crop, "s_crop");
    positive(static_cast<double>(grid_m), "m");
    positive(static_cast<double>(grid_n), "n");
    positive(s_images, "s_images");
    positive(static_cast<double>(crop_size), "crop_size");
    positive(static_cast<double>(stage1_crop), "stage1_crop");
    positive(static_cast<double>(stage1_batch), "stage1_batch");
    positive(static_cast<double>(stage1_crops_per_image), "stage1_crops_per_image");
    positive(stage1_lr, "stage1_lr");
    positive(beta, "beta");
    positive(static_cast<double>(batch_size), "batch_size");
    positive(static_cast<double>(random_heads), "random_heads");
    positive(stage2_lr, "stage2_lr");
    positive(static_cast<double>(sinkhorn_iters), "sinkhorn_iters");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw InvalidArgument("config: val_fraction must lie in (0, 1)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("config: momentum must lie in [0, 1)");
    if (ratio_unlabeled + ratio_labeled == 0) throw InvalidArgument("config: ratio must not be 0:0");
    if (crop_size % 4 || stage1_crop % 4) throw InvalidArgument("config: crop sizes must be divisible by 4");
  }

  /// Sets one key from its textual value. Unknown keys are an error.
  void set(const std::string& key, const std::string& value) {
    const std::string ctx = "config key '" + key + "'";
    auto num = [&] { return io::parse_double(value, ctx); };
    auto count = [&] {
      const double v = num();
      if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw InvalidArgument(ctx + ": expected a non-negative integer, got " + value);
      }
      return static_cast<std::size_t>(v);
    };
    auto flag = [&] {
      if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
      if (value == "0" || value == "false" || value == "no" || value == "off") return false;
      throw InvalidArgument(ctx + ": expected a boolean, got " + value);
    };
    if (key == "manifest") manifest = value;
    else if (key == "test_manifest") test_manifest = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "alpha") alpha = num();
    else if (key == "c_fmax") c_fmax = num();
    else if (key == "s_crop") s_crop = num();
    else if (key == "m") grid_m = count();
    else if (key == "n") grid_n = count();
    else if (key == "s_images") s_images = num();
    else if (key == "head_mass") head_mass = num();
    else if (key == "crop_size") crop_size = count();
    else if (key == "val_fraction") val_fraction = num();
    else if (key == "stage1_crop") stage1_crop = count();
    else if (key == "stage1_epochs") stage1_epochs = count();
    else if (key == "stage1_patience") stage1_patience = count();
    else if (key == "stage1_crops_per_image") stage1_crops_per_image = count();
    else if (key == "stage1_batch") stage1_batch = count();
    else if (key == "stage1_lr") stage1_lr = num();
    else if (key == "beta") beta = num();
    else if (key == "batch_size") batch_size = count();
    else if (key == "stage2_epochs") stage2_epochs = count();
    else if (key == "stage2_patience") stage2_patience = count();
    else if (key == "stage2_lr") stage2_lr = num();
    else if (key == "calibrate_head") calibrate_head = flag();
    else if (key == "momentum") momentum = num();
    else if (key == "grad_clip") grad_clip = num();
    else if (key == "sinkhorn_iters") sinkhorn_iters = count();
    else if (key == "sparse_percentile") sparse_percentile = num();
    else if (key == "canny_sigma") canny_sigma = num();
    else if (key == "pseudo_blur") pseudo_blur = num();
    else if (key == "mode") {
      if (value == "plain") mode = TrainMode::Plain;
      else if (value == "plus-plus") mode = TrainMode::PlusPlus;
      else if (value == "semi") mode = TrainMode::Semi;
      else throw InvalidArgument(ctx + ": expected plain, plus-plus or semi");
    }
    else if (key == "labeled") labeled = count();
    else if (key == "ratio") {
      const auto parts = io::split(value, ':');
      if (parts.size() != 2) throw InvalidArgument(ctx + ": expected U:L, e.g. 5:1");
      ratio_unlabeled = static_cast<std::size_t>(io::parse_double(parts[0], ctx));
      ratio_labeled = static_cast<std::size_t>(io::parse_double(parts[1], ctx));
    }
    else if (key == "diagonal_labeled") diagonal_labeled = flag();
    else if (key == "labeled_beta") labeled_beta = num();
    else if (key == "labeled_per_crop") labeled_per_crop = flag();
    else if (key == "allow_random_fen") allow_random_fen = flag();
    else if (key == "random_heads") random_heads = count();
    else if (key == "seed") {
      seed = static_cast<std::uint64_t>(std::stoull(value));
      seed_set = true;
    }
    else throw InvalidArgument("unknown config key '" + key + "'");
  }

  static std::vector<std::string> keys() {
    return {"manifest", "test_manifest", "out_dir", "alpha", "c_fmax", "s_crop", "m", "n",
            "s_images", "head_mass", "crop_size", "val_fraction", "stage1_crop", "stage1_epochs",
            "stage1_patience", "stage1_crops_per_image", "stage1_batch", "stage1_lr", "beta",
            "batch_size", "stage2_epochs", "stage2_patience", "stage2_lr", "calibrate_head", "momentum", "grad_clip",
            "sinkhorn_iters", "sparse_percentile", "canny_sigma", "pseudo_blur", "mode", "labeled",
            "ratio", "diagonal_labeled", "labeled_beta", "labeled_per_crop", "allow_random_fen", "random_heads", "seed"};
  }

  /// Parses "key = value" lines; '#' starts a comment.
  void load_text(const std::string& text, const std::string& context = "config") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto t = io::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw InvalidArgument(context + ":" + std::to_string(lineno) + ": expected key = value");
      }
      try {
        set(io::trim(t.substr(0, eq)), io::trim(t.substr(eq + 1)));
      } catch (const std::exception& e) {
        throw InvalidArgument(context + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void load_file(const std::filesystem::path& p) { load_text(io::read_file(p), p.string()); }

  /// Applies $CSSCCNN_SEED when no seed was given explicitly.
  void apply_env_seed() {
    if (seed_set) return;
    if (const char* env = std::getenv("CSSCCNN_SEED"); env && *env) {
      try {
        seed = std::stoull(env);
      } catch (const std::exception&) {
        throw InvalidArgument(std::string("CSSCCNN_SEED is not an integer: ") + env);
      }
      seed_set = true;
    }
  }

  std::string to_text() const {
    std::ostringstream s;
    s << "manifest = " << manifest << "\n"
      << "test_manifest = " << test_manifest << "\n"
      << "out_dir = " << out_dir << "\n"
      << "alpha = " << io::format_double(alpha) << "\n"
      << "c_fmax = " << io::format_double(c_fmax) << "\n"
      << "s_crop = " << io::format_double(s_crop) << "\n"
      << "m = " << grid_m << "\n"
      << "n = " << grid_n << "\n"
      << "s_images = " << io::format_double(s_images) << "\n"
      << "head_mass = " << io::format_double(head_mass) << "\n"
      << "crop_size = " << crop_size << "\n"
      << "val_fraction = " << io::format_double(val_fraction) << "\n"
      << "stage1_crop = " << stage1_crop << "\n"
      << "stage1_epochs = " << stage1_epochs << "\n"
      << "stage1_patience = " << stage1_patience << "\n"
      << "stage1_crops_per_image = " << stage1_crops_per_image << "\n"
      << "stage1_batch = " << stage1_batch << "\n"
      << "stage1_lr = " << io::format_double(stage1_lr) << "\n"
      << "beta = " << io::format_double(beta) << "\n"
      << "batch_size = " << batch_size << "\n"
      << "stage2_epochs = " << stage2_epochs << "\n"
      << "stage2_patience = " << stage2_patience << "\n"
      << "stage2_lr = " << io::format_double(stage2_lr) << "\n"
      << "calibrate_head = " << (calibrate_head ? "true" : "false") << "\n"
      << "momentum = " << io::format_double(momentum) << "\n"
      << "grad_clip = " << io::format_double(grad_clip) << "\n"
      << "sinkhorn_iters = " << sinkhorn_iters << "\n"
      << "sparse_percentile = " << io::format_double(sparse_percentile) << "\n"
      << "canny_sigma = " << io::format_double(canny_sigma) << "\n"
      << "pseudo_blur = " << io::format_double(pseudo_blur) << "\n"
      << "mode = " << mode_name(mode) << "\n"
      << "labeled = " << labeled << "\n"
      << "ratio = " << ratio_unlabeled << ":" << ratio_labeled << "\n"
      << "diagonal_labeled = " << (diagonal_labeled ? "true" : "false") << "\n"
      << "labeled_beta = " << io::format_double(labeled_beta) << "\n"
      << "labeled_per_crop = " << (labeled_per_crop ? "true" : "false") << "\n"
      << "allow_random_fen = " << (allow_random_fen ? "true" : "false") << "\n"
      << "random_heads = " << random_heads << "\n"
      << "seed = " << seed << "\n";
    return s.str();
  }

  /// Short stable fingerprint of the configuration, stored in checkpoints.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : to_text()) h = (h ^ ch) * 1099511628211ull;
    std::ostringstream s;
    s << std::hex << h;
    return s.str();
  }
};

}  // namespace cssccnn
