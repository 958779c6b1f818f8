#pragma once

// Full-image evaluation and the three reference baselines.

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/grid.hpp"
#include "cssccnn/pipeline/config.hpp"
#include "cssccnn/pipeline/data.hpp"
#include "cssccnn/pipeline/train.hpp"
#include "cssccnn/prior.hpp"

namespace cssccnn {

/// Per-image counts: density summed over each image's crop cover.
inline std::vector<double> predict_image_counts(const Net& net, const CropSet& crops, std::size_t n_images) {
  if (crops.features.size() != crops.size()) throw InvalidArgument("crops must carry cached features");
  std::vector<double> out(n_images, 0.0);
  for (std::size_t k = 0; k < crops.size(); ++k) {
    if (crops.image[k] >= n_images) throw InvalidArgument("crop refers to an image outside the set");
    const auto t = net.forward_density(crops.features[k]);
    out[crops.image[k]] += static_cast<double>(t.out.x.sum());
  }
  return out;
}

/// Mean baseline: the prior mean for every cell of every crop of the image.
inline double mean_baseline_count(const PriorSpec& prior, std::size_t cells_per_image) {
  return PriorTable(prior).mixture_mean() * static_cast<double>(cells_per_image);
}

/// P_prior baseline: each image's count is a sum of independent prior draws, one per cell.
inline std::vector<double> prior_baseline_counts(const PriorSpec& prior, std::size_t cells_per_image,
                                                 std::size_t n_images, std::uint64_t seed) {
  PriorSampler s(prior, seed);
  std::vector<double> out(n_images, 0.0);
  for (auto& c : out) {
    for (std::size_t k = 0; k < cells_per_image; ++k) c += s.draw();
  }
  return out;
}

struct EvalRow {
  std::string method;
  CountErrors errors;
};

struct EvalReport {
  std::vector<double> gt;
  std::vector<double> predicted;
  /// MAE of each untrained head behind the Random row (the first is the stage-1 net's own).
  std::vector<double> random_draw_mae;
  std::vector<EvalRow> rows;

  const CountErrors& operator[](const std::string& method) const {
    for (const auto& r : rows) {
      if (r.method == method) return r.errors;
    }
    throw InvalidArgument("no evaluation row named " + method);
  }

  std::string csv() const {
    std::ostringstream s;
    s << "method,mae,mse\n";
    for (const auto& r : rows) {
      s << r.method << "," << io::format_double(r.errors.mae) << "," << io::format_double(r.errors.mse) << "\n";
    }
    return s.str();
  }
};

/// `stage1` supplies the Random baseline (its density head never saw stage 2).
inline EvalReport evaluate(const Net& trained, const Net& stage1, const CropSet& test_crops,
                           const std::vector<double>& gt_counts, const RunConfig& cfg) {
  cfg.validate();
  const std::size_t n = gt_counts.size();
  if (n == 0) throw InvalidArgument("evaluate: empty test set");
  std::vector<std::size_t> per_image(n, 0);
  for (std::size_t i : test_crops.image) {
    if (i >= n) throw InvalidArgument("evaluate: manifest and crops disagree on the image count");
    ++per_image[i];
  }
  for (std::size_t c : per_image) {
    if (c == 0) throw InvalidArgument("evaluate: manifest lists an image with no crops");
  }
  const PriorSpec prior = cfg.prior();
  const std::size_t cells_per_image = static_cast<std::size_t>(
      std::llround(cfg.s_crop * static_cast<double>(cfg.grid_m * cfg.grid_n)));

  EvalReport rep;
  rep.gt = gt_counts;
  rep.predicted = predict_image_counts(trained, test_crops, n);
  rep.rows.push_back({"css", mae_mse(rep.predicted, gt_counts)});
  // An untrained head predicts at an arbitrary scale, so one draw says little; the Random row
  // averages the errors of the stage-1 head and cfg.random_heads - 1 fresh seeded heads.
  {
    CountErrors avg;
    Net net = stage1;
    for (std::size_t j = 0; j < cfg.random_heads; ++j) {
      if (j > 0) {
        const Net fresh(stage1.config(), cfg.seed + 0x4EADull + j);
        for (std::size_t i = 0; i < fresh.params().size(); ++i) {
          if (fresh.params()[i].group == nn::Group::Density) net.mutable_param(i).value = fresh.params()[i].value;
        }
      }
      const auto e = mae_mse(predict_image_counts(net, test_crops, n), gt_counts);
      rep.random_draw_mae.push_back(e.mae);
      avg.mae += e.mae / static_cast<double>(cfg.random_heads);
      avg.mse += e.mse / static_cast<double>(cfg.random_heads);
    }
    rep.rows.push_back({"random", avg});
  }
  rep.rows.push_back({"mean", mae_mse(std::vector<double>(n, mean_baseline_count(prior, cells_per_image)), gt_counts)});
  rep.rows.push_back({"prior", mae_mse(prior_baseline_counts(prior, cells_per_image, n, cfg.seed + 0xBA5Eull), gt_counts)});
  return rep;
}

}  // namespace cssccnn
