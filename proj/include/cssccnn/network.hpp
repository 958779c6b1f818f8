#pragma once

// Feature extraction network (three VGG-style blocks), rotation head and density head.
//
//   input 1ch ─ block1 (c1,c1) ─ pool ─ block2 (c2,c2) ─ pool ─ block3 (c3,c3) ─┬─ rotation head
//                                              └────────── skip ───────────────┴─ density head
//
// The density head sees the pooled block-2 output concatenated with block-3 output, both at
// 1/4 of the input resolution.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cssccnn/error.hpp"
#include "cssccnn/layers.hpp"
#include "cssccnn/raster.hpp"

namespace cssccnn::nn {

enum class Group : std::uint8_t { Fen = 0, Rotation = 1, Density = 2 };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::Fen: return "fen";
    case Group::Rotation: return "rot";
    default: return "density";
  }
}

struct NetConfig {
  int c1 = 16, c2 = 32, c3 = 64;
  int rot = 64;
  int dens = 16;
  int classes = 4;
  /// Initial bias of the final density convolution; positive so the clamp starts open.
  double density_bias = 0.01;

  bool operator==(const NetConfig&) const = default;
};

template <class T>
struct Param {
  std::string name;
  Group group = Group::Fen;
  std::vector<std::uint32_t> shape;
  Mat<T> value;
};

template <class T>
struct Gradients {
  std::vector<Mat<T>> g;

  Gradients& operator+=(const Gradients& o) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    return *this;
  }
  void scale(T s) {
    for (auto& m : g) m *= s;
  }
  void zero() {
    for (auto& m : g) m.setZero();
  }
  double norm() const {
    double s = 0.0;
    for (const auto& m : g) s += static_cast<double>(m.squaredNorm());
    return std::sqrt(s);
  }
  /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
  double clip(double max_norm) {
    const double n = norm();
    if (max_norm > 0.0 && n > max_norm) scale(static_cast<T>(max_norm / n));
    return n;
  }
};

template <class T>
struct FenTape {
  Act<T> input, a1, a2, p1, a3, a4, p2, a5, a6;
  std::vector<int> am1, am2;
};

/// Frozen-FEN outputs a density head needs: pooled block-2 output and block-3 output.
template <class T>
struct Features {
  Act<T> skip;
  Act<T> deep;
};

template <class T>
struct RotationTape {
  std::uint64_t version = 0;
  FenTape<T> fen;
  Act<T> r1, r2;
  Vec<T> pooled, logits;
};

template <class T>
struct DensityTape {
  std::uint64_t version = 0;
  bool has_fen = false;
  FenTape<T> fen;
  Act<T> concat, h1, out;
};

template <class T>
class Network {
 public:
  // Parameter slots, in checkpoint order.
  enum Slot : int {
    kB1C1 = 0, kB1C2 = 2, kB2C1 = 4, kB2C2 = 6, kB3C1 = 8, kB3C2 = 10,
    kRotC1 = 12, kRotC2 = 14, kRotFc = 16, kDenC1 = 18, kDenC2 = 20, kSlots = 22
  };

  explicit Network(NetConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.c1 < 1 || cfg.c2 < 1 || cfg.c3 < 1 || cfg.rot < 1 || cfg.dens < 1 || cfg.classes < 2) {
      throw InvalidArgument("NetConfig: widths must be positive");
    }
    std::mt19937_64 rng(seed);
    add_conv("fen.block1.conv1", Group::Fen, 1, cfg.c1, rng);
    add_conv("fen.block1.conv2", Group::Fen, cfg.c1, cfg.c1, rng);
    add_conv("fen.block2.conv1", Group::Fen, cfg.c1, cfg.c2, rng);
    add_conv("fen.block2.conv2", Group::Fen, cfg.c2, cfg.c2, rng);
    add_conv("fen.block3.conv1", Group::Fen, cfg.c2, cfg.c3, rng);
    add_conv("fen.block3.conv2", Group::Fen, cfg.c3, cfg.c3, rng);
    add_conv("rot.conv1", Group::Rotation, cfg.c3, cfg.rot, rng);
    add_conv("rot.conv2", Group::Rotation, cfg.rot, cfg.rot, rng);
    {
      std::normal_distribution<double> nd(0.0, std::sqrt(1.0 / cfg.rot));
      Mat<T> w(cfg.classes, cfg.rot);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(nd(rng));
      params_.push_back({"rot.fc.weight", Group::Rotation,
                         {static_cast<std::uint32_t>(cfg.classes), static_cast<std::uint32_t>(cfg.rot)}, w});
      params_.push_back({"rot.fc.bias", Group::Rotation, {static_cast<std::uint32_t>(cfg.classes)},
                         Mat<T>::Zero(cfg.classes, 1)});
    }
    add_conv("density.conv1", Group::Density, cfg.c2 + cfg.c3, cfg.dens, rng);
    add_conv("density.conv2", Group::Density, cfg.dens, 1, rng);
    params_[kDenC2 + 1].value.setConstant(static_cast<T>(cfg.density_bias));
  }

  const NetConfig& config() const { return cfg_; }
  const std::vector<Param<T>>& params() const { return params_; }
  /// Mutable access invalidates outstanding tapes.
  Param<T>& mutable_param(std::size_t i) {
    ++version_;
    return params_.at(i);
  }
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  void set_frozen(Group g, bool frozen) { frozen_[static_cast<int>(g)] = frozen; }
  bool frozen(Group g) const { return frozen_[static_cast<int>(g)]; }
  bool trainable(std::size_t slot) const { return !frozen(params_[slot].group); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
  std::size_t parameter_count(Group g) const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.group == g ? static_cast<std::size_t>(p.value.size()) : 0;
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> gr;
    for (const auto& p : params_) gr.g.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    return gr;
  }

  // ---- forward ----

  FenTape<T> forward_fen(const GrayImage& img) const { return forward_fen(image_to_act<T>(img)); }

  FenTape<T> forward_fen(Act<T> input) const {
    if (input.h % 4 || input.w % 4) throw ShapeMismatch("network input sides must be divisible by 4");
    FenTape<T> t;
    t.input = std::move(input);
    t.a1 = conv_relu(kB1C1, t.input);
    t.a2 = conv_relu(kB1C2, t.a1);
    t.p1 = maxpool2_forward(t.a2, t.am1);
    t.a3 = conv_relu(kB2C1, t.p1);
    t.a4 = conv_relu(kB2C2, t.a3);
    t.p2 = maxpool2_forward(t.a4, t.am2);
    t.a5 = conv_relu(kB3C1, t.p2);
    t.a6 = conv_relu(kB3C2, t.a5);
    return t;
  }

  Features<T> features(const GrayImage& img) const {
    auto t = forward_fen(img);
    return {std::move(t.p2), std::move(t.a6)};
  }

  RotationTape<T> forward_rotation(const GrayImage& img) const {
    RotationTape<T> t;
    t.version = version_;
    t.fen = forward_fen(img);
    t.r1 = conv_relu(kRotC1, t.fen.a6);
    t.r2 = conv_relu(kRotC2, t.r1);
    t.pooled = t.r2.x.rowwise().mean();
    t.logits = params_[kRotFc].value * t.pooled + params_[kRotFc + 1].value.col(0);
    return t;
  }

  Vec<T> logits(const GrayImage& img) const { return forward_rotation(img).logits; }

  DensityTape<T> forward_density(const GrayImage& img) const {
    DensityTape<T> t;
    t.fen = forward_fen(img);
    t.has_fen = true;
    density_head(t.fen.p2, t.fen.a6, t);
    return t;
  }

  DensityTape<T> forward_density(const Features<T>& f) const {
    DensityTape<T> t;
    density_head(f.skip, f.deep, t);
    return t;
  }

  /// Channel-mean activation of each block's output (pooled for blocks 1 and 2).
  std::vector<Raster<float>> mean_feature_maps(const GrayImage& img) const {
    return mean_feature_maps(image_to_act<T>(img));
  }

  std::vector<Raster<float>> mean_feature_maps(Act<T> input) const {
    const auto t = forward_fen(std::move(input));
    std::vector<Raster<float>> out;
    for (const Act<T>* a : {&t.p1, &t.p2, &t.a6}) {
      Raster<float> r(static_cast<std::size_t>(a->w), static_cast<std::size_t>(a->h));
      const Vec<T> m = a->x.colwise().mean().transpose();
      for (Eigen::Index i = 0; i < m.size(); ++i) r.data[static_cast<std::size_t>(i)] = static_cast<float>(m(i));
      out.push_back(std::move(r));
    }
    return out;
  }

  // ---- backward ----

  void backward_rotation(const RotationTape<T>& t, const Vec<T>& dlogits, Gradients<T>& gr) const {
    check_tape(t.version);
    if (dlogits.size() != t.logits.size()) throw ShapeMismatch("backward_rotation: gradient size");
    const bool need_fen = !frozen(Group::Fen);
    if (trainable(kRotFc)) {
      gr.g[kRotFc].noalias() += dlogits * t.pooled.transpose();
      gr.g[kRotFc + 1] += dlogits;
    }
    if (frozen(Group::Rotation) && !need_fen) return;
    const Vec<T> dpooled = params_[kRotFc].value.transpose() * dlogits;
    Mat<T> d = dpooled.replicate(1, t.r2.pixels()) / static_cast<T>(t.r2.pixels());
    relu_backward(t.r2, d);
    Act<T> dr1;
    conv_back(kRotC2, t.r1, d, gr, &dr1);
    relu_backward(t.r1, dr1.x);
    if (!need_fen) {
      conv_back(kRotC1, t.fen.a6, dr1.x, gr, nullptr);
      return;
    }
    Act<T> da6;
    conv_back(kRotC1, t.fen.a6, dr1.x, gr, &da6);
    backward_fen(t.fen, da6.x, nullptr, gr);
  }

  /// `dout` is d(loss)/d(density), shaped 1 x pixels like tape.out.x.
  void backward_density(const DensityTape<T>& t, const Mat<T>& dout, Gradients<T>& gr) const {
    check_tape(t.version);
    if (dout.rows() != 1 || dout.cols() != t.out.x.cols()) {
      throw ShapeMismatch("backward_density: gradient must match the density output");
    }
    const bool need_fen = !frozen(Group::Fen);
    if (need_fen && !t.has_fen) {
      throw InvalidArgument("backward_density: tape built from cached features cannot train the FEN");
    }
    if (frozen(Group::Density) && !need_fen) return;
    Mat<T> d = dout;
    relu_backward(t.out, d);
    Act<T> dh1;
    conv_back(kDenC2, t.h1, d, gr, &dh1);
    relu_backward(t.h1, dh1.x);
    if (!need_fen) {
      conv_back(kDenC1, t.concat, dh1.x, gr, nullptr);
      return;
    }
    Act<T> dcat;
    conv_back(kDenC1, t.concat, dh1.x, gr, &dcat);
    const Mat<T> dskip = dcat.x.topRows(cfg_.c2);
    const Mat<T> ddeep = dcat.x.bottomRows(cfg_.c3);
    backward_fen(t.fen, ddeep, &dskip, gr);
  }

 private:
  void add_conv(const std::string& name, Group g, int cin, int cout, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (9.0 * cin)));
    Mat<T> w(cout, 9 * cin);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(nd(rng));
    params_.push_back({name + ".weight", g,
                       {static_cast<std::uint32_t>(cout), static_cast<std::uint32_t>(cin), 3u, 3u}, w});
    params_.push_back({name + ".bias", g, {static_cast<std::uint32_t>(cout)}, Mat<T>::Zero(cout, 1)});
  }

  Act<T> conv_relu(int slot, const Act<T>& in) const {
    Act<T> a = conv3_forward<T>(params_[slot].value, params_[slot + 1].value.col(0), in);
    relu_inplace(a);
    return a;
  }

  void conv_back(int slot, const Act<T>& in, const Mat<T>& dout, Gradients<T>& gr, Act<T>* din) const {
    if (trainable(static_cast<std::size_t>(slot))) {
      Vec<T> db = Vec<T>::Zero(params_[slot].value.rows());
      conv3_backward<T>(params_[slot].value, in, dout, &gr.g[slot], &db, din);
      gr.g[slot + 1] += db;
    } else {
      conv3_backward<T>(params_[slot].value, in, dout, nullptr, nullptr, din);
    }
  }

  void density_head(const Act<T>& skip, const Act<T>& deep, DensityTape<T>& t) const {
    if (skip.c != cfg_.c2 || deep.c != cfg_.c3 || skip.h != deep.h || skip.w != deep.w) {
      throw ShapeMismatch("density head: feature shapes do not match the network");
    }
    t.version = version_;
    t.concat = Act<T>(cfg_.c2 + cfg_.c3, deep.h, deep.w);
    t.concat.x.topRows(cfg_.c2) = skip.x;
    t.concat.x.bottomRows(cfg_.c3) = deep.x;
    t.h1 = conv_relu(kDenC1, t.concat);
    t.out = conv_relu(kDenC2, t.h1);
  }

  void backward_fen(const FenTape<T>& t, const Mat<T>& da6_in, const Mat<T>* dp2_extra,
                    Gradients<T>& gr) const {
    Mat<T> d = da6_in;
    relu_backward(t.a6, d);
    Act<T> da5;
    conv_back(kB3C2, t.a5, d, gr, &da5);
    relu_backward(t.a5, da5.x);
    Act<T> dp2;
    conv_back(kB3C1, t.p2, da5.x, gr, &dp2);
    if (dp2_extra) dp2.x += *dp2_extra;
    Act<T> da4 = maxpool2_backward(t.a4, t.am2, dp2.x);
    relu_backward(t.a4, da4.x);
    Act<T> da3;
    conv_back(kB2C2, t.a3, da4.x, gr, &da3);
    relu_backward(t.a3, da3.x);
    Act<T> dp1;
    conv_back(kB2C1, t.p1, da3.x, gr, &dp1);
    Act<T> da2 = maxpool2_backward(t.a2, t.am1, dp1.x);
    relu_backward(t.a2, da2.x);
    Act<T> da1;
    conv_back(kB1C2, t.a1, da2.x, gr, &da1);
    relu_backward(t.a1, da1.x);
    conv_back(kB1C1, t.input, da1.x, gr, nullptr);
  }

  void check_tape(std::uint64_t v) const {
    if (v != version_) throw StaleTape("tape was recorded before the parameters last changed");
  }

  NetConfig cfg_;
  std::vector<Param<T>> params_;
  bool frozen_[3] = {false, false, false};
  std::uint64_t version_ = 1;
};

/// Density output of a tape as a raster (values already clamped at zero).
template <class T>
Raster<float> density_map(const DensityTape<T>& t) {
  Raster<float> d(static_cast<std::size_t>(t.out.w), static_cast<std::size_t>(t.out.h));
  for (std::size_t i = 0; i < d.size(); ++i) d.data[i] = static_cast<float>(t.out.x(0, static_cast<Eigen::Index>(i)));
  return d;
}

/// Copies parameters (and freeze flags) into a network of another scalar type.
template <class To, class From>
Network<To> network_cast(const Network<From>& src) {
  Network<To> dst(src.config(), 0);
  for (std::size_t i = 0; i < src.params().size(); ++i) {
    dst.mutable_param(i).value = src.params()[i].value.template cast<To>();
  }
  for (Group g : {Group::Fen, Group::Rotation, Group::Density}) dst.set_frozen(g, src.frozen(g));
  return dst;
}

/// Momentum SGD: v = mu * v + g; w -= lr * v. Frozen parameters are left untouched.
template <class T>
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
      throw InvalidArgument("MomentumSgd: need lr >= 0 and momentum in [0, 1)");
    }
  }

  void step(Network<T>& net, const Gradients<T>& gr) {
    const auto& ps = net.params();
    if (gr.g.size() != ps.size()) throw ShapeMismatch("sgd_step: gradient count");
    if (velocity_.empty()) {
      for (const auto& p : ps) velocity_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (gr.g[i].rows() != ps[i].value.rows() || gr.g[i].cols() != ps[i].value.cols()) {
        throw ShapeMismatch("sgd_step: gradient shape for " + ps[i].name);
      }
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!net.trainable(i)) continue;
      velocity_[i] = static_cast<T>(momentum_) * velocity_[i] + gr.g[i];
      net.mutable_param(i).value -= static_cast<T>(lr_) * velocity_[i];
    }
    net.touch();
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, momentum_;
  std::vector<Mat<T>> velocity_;
};

}  // namespace cssccnn::nn
