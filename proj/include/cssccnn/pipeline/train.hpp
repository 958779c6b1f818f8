#pragma once

// Training loops. Stage 1 learns the feature extractor from the rotation pretext task. Stage 2
// freezes it and fits the density head by matching batch cell-count statistics to samples of
// the prior; the semi-supervised variant interleaves batches whose targets are true counts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/grid.hpp"
#include "cssccnn/network.hpp"
#include "cssccnn/pipeline/config.hpp"
#include "cssccnn/pipeline/data.hpp"
#include "cssccnn/prior.hpp"
#include "cssccnn/transport.hpp"
#include "cssccnn/vision.hpp"

namespace cssccnn {

using Net = nn::Network<float>;

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double seconds = 0.0;
};

/// Called after each epoch; return false to stop early.
using EpochCallback = std::function<bool(const EpochLog&)>;

// ---- stage 1 ----

struct Stage1Result {
  Net net;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double final_train_loss = 0.0;
  std::vector<EpochLog> history;
};

namespace detail {

inline GrayImage random_crop(const GrayImage& img, std::size_t side, std::mt19937_64& rng) {
  if (img.width < side || img.height < side) {
    throw ShapeMismatch("image smaller than the " + std::to_string(side) + "-px training crop");
  }
  std::uniform_int_distribution<std::size_t> ux(0, img.width - side), uy(0, img.height - side);
  const std::size_t x = ux(rng), y = uy(rng);
  return crop(img, x, y, side, side);
}

// Four corners and the centre: a fixed validation view of each held-out image.
inline std::vector<GrayImage> fixed_crops(const GrayImage& img, std::size_t side) {
  if (img.width < side || img.height < side) {
    throw ShapeMismatch("image smaller than the " + std::to_string(side) + "-px training crop");
  }
  const std::size_t rx = img.width - side, ry = img.height - side;
  return {crop(img, 0, 0, side, side), crop(img, rx, 0, side, side), crop(img, 0, ry, side, side),
          crop(img, rx, ry, side, side), crop(img, rx / 2, ry / 2, side, side)};
}

inline GrayImage mirror(const GrayImage& img) {
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.width - 1 - x, y) = img.at(x, y);
  }
  return out;
}

inline int argmax(const nn::Vec<float>& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

}  // namespace detail

inline double rotation_accuracy(const Net& net, const std::vector<GrayImage>& crops) {
  if (crops.empty()) return 0.0;
  std::size_t right = 0;
  for (const auto& c : crops) {
    for (int k = 0; k < 4; ++k) right += detail::argmax(net.logits(rotate90(c, k))) == k;
  }
  return static_cast<double>(right) / static_cast<double>(4 * crops.size());
}

inline Stage1Result train_stage1(const ImageSet& data, const RunConfig& cfg,
                                 const nn::NetConfig& arch = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.size() < 2) throw InvalidArgument("stage 1 needs at least two images (train and validation)");
  const auto split = split_indices(data.size(), cfg.val_fraction, cfg.seed);
  std::vector<GrayImage> val_crops;
  for (std::size_t i : split.val) {
    for (auto& c : detail::fixed_crops(data.images[i], cfg.stage1_crop)) val_crops.push_back(std::move(c));
  }

  Net net(arch, cfg.seed);
  net.set_frozen(nn::Group::Density, true);
  nn::MomentumSgd<float> opt(cfg.stage1_lr, cfg.momentum);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);
  std::uniform_int_distribution<int> rot(0, 3);
  std::bernoulli_distribution coin(0.5);

  Stage1Result res{net, -1.0, 0, 0, 0.0, {}};
  std::size_t since_best = 0;
  const std::size_t max_epochs = std::max<std::size_t>(cfg.stage1_epochs, 1);
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Cosine decay to a tenth of the base rate over the epoch budget.
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(max_epochs);
    opt.set_lr(cfg.stage1_lr * (0.55 + 0.45 * std::cos(3.14159265358979323846 * progress)));
    std::vector<std::size_t> order;
    for (std::size_t i : split.train) {
      for (std::size_t r = 0; r < cfg.stage1_crops_per_image; ++r) order.push_back(i);
    }
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    auto grads = net.zero_gradients();
    std::size_t in_batch = 0;
    for (std::size_t s = 0; s < order.size(); ++s) {
      const int k = rot(rng);
      auto base = detail::random_crop(data.images[order[s]], cfg.stage1_crop, rng);
      // A mirror keeps "up" where it was, so it is a free augmentation for this task.
      if (coin(rng)) base = detail::mirror(base);
      const auto sample = rotate90(base, k);
      const auto tape = net.forward_rotation(sample);
      nn::Vec<float> dlogits;
      loss_sum += nn::cross_entropy(tape.logits, k, &dlogits);
      net.backward_rotation(tape, dlogits, grads);
      if (++in_batch == cfg.stage1_batch || s + 1 == order.size()) {
        grads.scale(1.0f / static_cast<float>(in_batch));
        grads.clip(cfg.grad_clip);
        opt.step(net, grads);
        grads.zero();
        in_batch = 0;
      }
    }

    const double acc = rotation_accuracy(net, val_crops);
    EpochLog log{epoch, loss_sum / static_cast<double>(order.size()), acc,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    res.history.push_back(log);
    res.epochs_run = epoch;
    res.final_train_loss = log.train_loss;
    if (acc > res.best_val_accuracy) {
      res.best_val_accuracy = acc;
      res.best_epoch = epoch;
      res.net = net;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_epoch && !on_epoch(log)) break;
    if (since_best >= cfg.stage1_patience) break;
  }
  res.net.set_frozen(nn::Group::Density, false);
  return res;
}

// ---- stage 2 ----

/// Crops with known per-cell counts for the semi-supervised batches.
struct LabeledCrops {
  std::vector<nn::Features<float>> features;
  std::vector<CellGrid> cells;

  std::size_t size() const { return features.size(); }
};

struct Stage2Result {
  Net net;
  /// Validation loss of the incoming head, before calibration.
  double initial_val_loss = 0.0;
  /// Validation loss right after calibration (equal to initial_val_loss without it).
  double calibrated_val_loss = 0.0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t fallbacks = 0;
  std::vector<EpochLog> history;
};

namespace detail {

// Cell index of every pixel of a w x h map split into an m x n grid (same bands as
// cells_from_density).
inline std::vector<int> cell_of_pixel(std::size_t w, std::size_t h, std::size_t m, std::size_t n) {
  std::vector<int> out(w * h, 0);
  for (std::size_t r = 0; r < m; ++r) {
    const auto [y0, y1] = cssccnn::detail::band(h, m, r);
    for (std::size_t c = 0; c < n; ++c) {
      const auto [x0, x1] = cssccnn::detail::band(w, n, c);
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) out[y * w + x] = static_cast<int>(r * n + c);
      }
    }
  }
  return out;
}

class DensityBatch {
 public:
  DensityBatch(const Net& net, std::size_t m, std::size_t n) : net_(net), cells_(m * n), grid_m_(m), grid_n_(n) {}

  /// Forward pass; appends the crop's cell counts to `values`.
  void add(const nn::Features<float>& f, std::vector<double>& values) {
    tapes_.push_back(net_.forward_density(f));
    const auto& out = tapes_.back().out;
    if (map_.empty()) map_ = cell_of_pixel(static_cast<std::size_t>(out.w), static_cast<std::size_t>(out.h),
                                           grid_m_, grid_n_);
    std::vector<double> c(cells_, 0.0);
    for (Eigen::Index p = 0; p < out.x.cols(); ++p) c[static_cast<std::size_t>(map_[static_cast<std::size_t>(p)])] += out.x(0, p);
    values.insert(values.end(), c.begin(), c.end());
  }

  /// `dcell[k * cells + j]` is d(loss)/d(count of cell j in crop k).
  void backward(const std::vector<double>& dcell, nn::Gradients<float>& grads) const {
    for (std::size_t k = 0; k < tapes_.size(); ++k) {
      const auto& t = tapes_[k];
      nn::Mat<float> dout(1, t.out.x.cols());
      for (Eigen::Index p = 0; p < dout.cols(); ++p) {
        dout(0, p) = static_cast<float>(dcell[k * cells_ + static_cast<std::size_t>(map_[static_cast<std::size_t>(p)])]);
      }
      net_.backward_density(t, dout, grads);
    }
  }

 private:
  const Net& net_;
  std::size_t cells_;
  std::size_t grid_m_, grid_n_;
  std::vector<int> map_;
  std::vector<nn::DensityTape<float>> tapes_;
};

inline std::vector<double> scaled(std::span<const double> v, double s) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * s;
  return out;
}

struct ChannelScale {
  nn::Vec<float> skip, deep;
};

// Root-mean-square activation of every feature channel over all pixels of all crops.
inline ChannelScale channel_rms(const std::vector<nn::Features<float>>& fs) {
  if (fs.empty()) throw InvalidArgument("channel_rms: no features");
  ChannelScale c{nn::Vec<float>::Zero(fs[0].skip.c), nn::Vec<float>::Zero(fs[0].deep.c)};
  double pixels = 0.0;
  for (const auto& f : fs) {
    c.skip += f.skip.x.rowwise().squaredNorm();
    c.deep += f.deep.x.rowwise().squaredNorm();
    pixels += static_cast<double>(f.skip.x.cols());
  }
  const float inv = static_cast<float>(1.0 / pixels);
  c.skip = (c.skip * inv).cwiseSqrt().cwiseMax(1e-3f);
  c.deep = (c.deep * inv).cwiseSqrt().cwiseMax(1e-3f);
  return c;
}

inline std::vector<nn::Features<float>> divide(const std::vector<nn::Features<float>>& fs, const ChannelScale& c) {
  std::vector<nn::Features<float>> out = fs;
  const nn::Vec<float> is = c.skip.cwiseInverse(), id = c.deep.cwiseInverse();
  for (auto& f : out) {
    f.skip.x = is.asDiagonal() * f.skip.x;
    f.deep.x = id.asDiagonal() * f.deep.x;
  }
  return out;
}

// Divides the input columns of the density head's first convolution by the channel scale,
// turning a head trained on unit-scale features into one that takes raw features.
inline void fold_density_input(Net& net, const ChannelScale& c) {
  auto& w = net.mutable_param(Net::kDenC1).value;
  const auto cs = static_cast<Eigen::Index>(c.skip.size());
  const auto cin = cs + static_cast<Eigen::Index>(c.deep.size());
  for (Eigen::Index k = 0; k < 9; ++k) {
    for (Eigen::Index ci = 0; ci < cin; ++ci) {
      const float v = ci < cs ? c.skip(ci) : c.deep(ci - cs);
      w.col(k * cin + ci) /= v;
    }
  }
}

}  // namespace detail

/// Predicted cell counts for every crop, concatenated crop by crop.
inline std::vector<double> predict_cells(const Net& net, const std::vector<nn::Features<float>>& features,
                                         std::size_t m, std::size_t n) {
  std::vector<double> values;
  for (const auto& f : features) {
    detail::DensityBatch b(net, m, n);
    b.add(f, values);
  }
  return values;
}

namespace detail {

// Starting point for the density head on unit-scale features: both convolutions made
// non-negative, so the output grows with feature activity, the first one rescaled to unit-RMS
// hidden units, and the last one rescaled so the mean cell count equals `target_mean`. A
// random-sign head starts from an arbitrary ranking of the crops, which transport training
// mostly keeps.
inline void calibrate_density_head(Net& net, const std::vector<nn::Features<float>>& fs, std::size_t m,
                                   std::size_t n, double target_mean) {
  if (fs.empty()) throw InvalidArgument("calibrate_density_head: no features");
  for (std::size_t slot : {std::size_t{Net::kDenC1}, std::size_t{Net::kDenC2}}) {
    net.mutable_param(slot).value = net.params()[slot].value.cwiseAbs();
  }
  double ss = 0.0, count = 0.0;
  for (const auto& f : fs) {
    const auto t = net.forward_density(f);
    ss += static_cast<double>(t.h1.x.squaredNorm());
    count += static_cast<double>(t.h1.x.size());
  }
  const double rms = std::sqrt(ss / count);
  if (rms > 0.0) {
    net.mutable_param(Net::kDenC1).value /= static_cast<float>(rms);
    net.mutable_param(Net::kDenC1 + 1).value /= static_cast<float>(rms);
  }
  double mean = 0.0;
  {
    const auto cells = predict_cells(net, fs, m, n);
    for (double c : cells) mean += c;
    mean /= static_cast<double>(cells.size());
  }
  if (mean > 0.0) {
    const float k = static_cast<float>(target_mean / mean);
    net.mutable_param(Net::kDenC2).value *= k;
    net.mutable_param(Net::kDenC2 + 1).value *= k;
  }
}

}  // namespace detail

/// Transport loss of predictions (`pred`, normalised) against a reference sample (`ref`,
/// normalised), optionally split by sparse/dense groups.
struct MatchResult {
  double loss = 0.0;
  std::vector<double> grad;
  bool fell_back = false;
};

inline MatchResult match_to_reference(const std::vector<double>& ref, const std::vector<double>& pred,
                                      const std::vector<std::uint8_t>* ref_groups,
                                      const std::vector<std::uint8_t>* pred_groups,
                                      const SinkhornOptions& opts) {
  const EmpiricalMeasure a(ref), b(pred);
  MatchResult r;
  if (ref_groups && pred_groups) {
    auto s = split_sinkhorn(a, b, *ref_groups, *pred_groups, opts, nullptr);
    r.loss = s.loss;
    r.grad = std::move(s.grad);
    r.fell_back = s.fell_back;
  } else {
    const auto s = sinkhorn(a, b, opts);
    r.loss = s.loss;
    r.grad = sinkhorn_grad(s, a, b);
  }
  return r;
}

/// Stage 2 (and its semi-supervised variant when `labeled` is non-empty and cfg.mode is Semi).
/// `init` must come from stage 1 unless cfg.allow_random_fen is set; the caller states which
/// through `init_is_pretrained`.
inline Stage2Result train_stage2(const Net& init, bool init_is_pretrained, const CropSet& train,
                                 const CropSet& val, const RunConfig& cfg,
                                 const LabeledCrops* labeled = nullptr, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (!init_is_pretrained && !cfg.allow_random_fen) {
    throw InvalidArgument("stage 2 needs a stage-1 checkpoint (pass --allow-random-fen to train on a random FEN)");
  }
  if (train.features.size() != train.size() || val.features.size() != val.size()) {
    throw InvalidArgument("stage 2 crops must carry cached features");
  }
  const bool plus_plus = cfg.mode == TrainMode::PlusPlus;
  if (plus_plus && (train.pseudo.size() != train.size() || val.pseudo.size() != val.size())) {
    throw InvalidArgument("plus-plus mode needs pseudo counts on every crop");
  }
  const bool semi = cfg.mode == TrainMode::Semi && labeled && labeled->size() > 0;
  if (train.size() == 0 && !semi) throw InvalidArgument("stage 2: empty training set");
  if (val.size() == 0) throw InvalidArgument("stage 2: empty validation set");

  const PriorSpec prior = cfg.prior();
  const double cmax = prior.c_max_cell;
  const std::size_t cells = cfg.grid_m * cfg.grid_n;
  PriorSampler sampler(prior, cfg.seed * 0x2545F4914F6CDD1Dull + 7);
  SinkhornOptions opts;
  opts.beta = cfg.beta;
  opts.max_iter = static_cast<int>(cfg.sinkhorn_iters);

  // The head trains on features scaled to unit RMS per channel; the scale is folded back into
  // its first convolution on the way out, so the returned network takes raw features. The
  // incoming head weights are read as unit-scale weights: their initialisation assumes unit
  // inputs, and carrying them over exactly leaves most of the head dead.
  const std::size_t cycle = cfg.ratio_unlabeled + cfg.ratio_labeled;
  const bool all_labeled = semi && cfg.ratio_unlabeled == 0;
  // With every batch labeled the unlabeled pool is never touched, including here.
  const auto scale = detail::channel_rms(train.size() && !all_labeled ? train.features : labeled->features);
  const auto train_f = detail::divide(train.features, scale);
  const auto val_f = detail::divide(val.features, scale);
  const auto labeled_f = semi ? detail::divide(labeled->features, scale) : std::vector<nn::Features<float>>{};

  Net net = init;
  net.set_frozen(nn::Group::Fen, true);
  net.set_frozen(nn::Group::Rotation, true);
  net.set_frozen(nn::Group::Density, false);
  nn::MomentumSgd<float> opt(cfg.stage2_lr, cfg.momentum);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + 2);

  // Fixed validation reference: one prior draw per validation cell.
  std::vector<double> val_ref;
  {
    PriorSampler vs(prior, cfg.seed + 0xA11CEull);
    val_ref = detail::scaled(vs.draw(val.size() * cells).values(), 1.0 / cmax);
  }
  std::vector<std::uint8_t> val_ref_groups, val_pred_groups;
  if (plus_plus) {
    std::vector<double> pseudo;
    for (const auto& g : val.pseudo) pseudo.insert(pseudo.end(), g.counts.begin(), g.counts.end());
    val_pred_groups = group_by_percentile(pseudo, cfg.sparse_percentile);
    val_ref_groups = group_by_percentile(val_ref, cfg.sparse_percentile);
  }
  auto val_loss = [&](const Net& n) {
    const auto pred = detail::scaled(predict_cells(n, val_f, cfg.grid_m, cfg.grid_n), 1.0 / cmax);
    return match_to_reference(val_ref, pred, plus_plus ? &val_ref_groups : nullptr,
                              plus_plus ? &val_pred_groups : nullptr, opts)
        .loss;
  };

  Stage2Result res;
  res.initial_val_loss = val_loss(net);
  if (cfg.calibrate_head) {
    detail::calibrate_density_head(net, train.size() && !all_labeled ? train_f : labeled_f, cfg.grid_m, cfg.grid_n,
                                   sampler.table().mixture_mean());
  }
  res.net = net;
  res.calibrated_val_loss = val_loss(net);
  res.best_val_loss = res.calibrated_val_loss;

  std::vector<std::size_t> labeled_order;
  if (semi) {
    labeled_order.resize(labeled->size());
    std::iota(labeled_order.begin(), labeled_order.end(), std::size_t{0});
  }
  std::size_t labeled_pos = labeled_order.size();

  auto unlabeled_step = [&](const std::vector<std::size_t>& batch, nn::Gradients<float>& grads) {
    detail::DensityBatch db(net, cfg.grid_m, cfg.grid_n);
    std::vector<double> pred;
    for (std::size_t k : batch) db.add(train_f[k], pred);
    const auto pred_n = detail::scaled(pred, 1.0 / cmax);
    const auto ref = detail::scaled(sampler.draw(pred.size()).values(), 1.0 / cmax);
    MatchResult m;
    if (plus_plus) {
      std::vector<double> pseudo;
      for (std::size_t k : batch) pseudo.insert(pseudo.end(), train.pseudo[k].counts.begin(), train.pseudo[k].counts.end());
      const auto gp = group_by_percentile(pseudo, cfg.sparse_percentile);
      const auto gr = group_by_percentile(ref, cfg.sparse_percentile);
      m = match_to_reference(ref, pred_n, &gr, &gp, opts);
      res.fallbacks += m.fell_back;
    } else {
      m = match_to_reference(ref, pred_n, nullptr, nullptr, opts);
    }
    db.backward(detail::scaled(m.grad, 1.0 / cmax), grads);
    return m.loss;
  };

  auto labeled_step = [&](nn::Gradients<float>& grads) {
    const std::size_t take = std::min(cfg.batch_size, labeled->size());
    std::vector<std::size_t> batch;
    while (batch.size() < take) {
      if (labeled_pos >= labeled_order.size()) {
        std::shuffle(labeled_order.begin(), labeled_order.end(), rng);
        labeled_pos = 0;
      }
      batch.push_back(labeled_order[labeled_pos++]);
    }
    detail::DensityBatch db(net, cfg.grid_m, cfg.grid_n);
    std::vector<double> pred, truth;
    for (std::size_t k : batch) {
      db.add(labeled_f[k], pred);
      truth.insert(truth.end(), labeled->cells[k].counts.begin(), labeled->cells[k].counts.end());
    }
    const auto pred_n = detail::scaled(pred, 1.0 / cmax);
    const auto truth_n = detail::scaled(truth, 1.0 / cmax);
    std::vector<double> grad(pred.size());
    double loss = 0.0;
    if (cfg.diagonal_labeled) {
      const double n = static_cast<double>(pred.size());
      for (std::size_t j = 0; j < pred.size(); ++j) {
        const double d = pred_n[j] - truth_n[j];
        loss += d * d / n;
        grad[j] = 2.0 * d / n;
      }
    } else {
      // Near-exact assignment within each labeled crop, so the batch still says which crop
      // is dense rather than only how counts are spread across the batch.
      SinkhornOptions lo = opts;
      lo.beta = cfg.labeled_beta > 0.0 ? cfg.labeled_beta : cfg.beta;
      const std::size_t group = cfg.labeled_per_crop ? cells : pred.size();
      const double parts = static_cast<double>(pred.size() / group);
      for (std::size_t k = 0; k < pred.size(); k += group) {
        const std::vector<double> t(truth_n.begin() + static_cast<std::ptrdiff_t>(k),
                                    truth_n.begin() + static_cast<std::ptrdiff_t>(k + group));
        const std::vector<double> p(pred_n.begin() + static_cast<std::ptrdiff_t>(k),
                                    pred_n.begin() + static_cast<std::ptrdiff_t>(k + group));
        const auto m = match_to_reference(t, p, nullptr, nullptr, lo);
        loss += m.loss / parts;
        for (std::size_t j = 0; j < group; ++j) grad[k + j] = m.grad[j] / parts;
      }
    }
    db.backward(detail::scaled(grad, 1.0 / cmax), grads);
    return loss;
  };

  std::size_t since_best = 0;
  std::size_t step = 0;
  const std::size_t max_epochs = std::max<std::size_t>(cfg.stage2_epochs, 1);
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!all_labeled) std::shuffle(order.begin(), order.end(), rng);
    const std::size_t bs = std::min(cfg.batch_size, std::max<std::size_t>(order.size(), 1));
    std::size_t n_batches = order.size() / bs;
    if (all_labeled) n_batches = std::max<std::size_t>(1, (labeled->size() + cfg.batch_size - 1) / cfg.batch_size);

    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    std::size_t next = 0;
    auto grads = net.zero_gradients();
    for (std::size_t b = 0; b < n_batches;) {
      const bool take_labeled = semi && (all_labeled || step % cycle >= cfg.ratio_unlabeled);
      ++step;
      grads.zero();
      if (take_labeled) {
        loss_sum += labeled_step(grads);
      } else {
        std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(next),
                                       order.begin() + static_cast<std::ptrdiff_t>(next + bs));
        next += bs;
        ++b;
        loss_sum += unlabeled_step(batch, grads);
      }
      if (all_labeled) ++b;
      ++loss_n;
      grads.clip(cfg.grad_clip);
      opt.step(net, grads);
    }

    const double vl = val_loss(net);
    EpochLog log{epoch, loss_sum / std::max<std::size_t>(loss_n, 1), vl,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    res.history.push_back(log);
    res.epochs_run = epoch;
    if (vl < res.best_val_loss) {
      res.best_val_loss = vl;
      res.best_epoch = epoch;
      res.net = net;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_epoch && !on_epoch(log)) break;
    if (since_best >= cfg.stage2_patience) break;
  }
  detail::fold_density_input(res.net, scale);
  res.net.set_frozen(nn::Group::Fen, false);
  res.net.set_frozen(nn::Group::Rotation, false);
  return res;
}

}  // namespace cssccnn
