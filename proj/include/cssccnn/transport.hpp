#pragma once

// Entropy-regularised optimal transport between equal-size uniform-weight measures.
//
// The plan P solves  min <P, M> - (1/beta) E(P)  over the transport polytope, with
// M_ij = (a_i - b_j)^2 and E(P) = -sum P log P. Rows index `a` (the target, e.g. prior
// samples) and columns index `b` (the predictions that receive gradients).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "cssccnn/error.hpp"
#include "cssccnn/measure.hpp"

namespace cssccnn {

enum class SinkhornDomain { Auto, Direct, Log };

struct SinkhornOptions {
  double beta = 10.0;
  int max_iter = 500;
  /// Stop once the largest marginal violation falls below this.
  double tol = 1e-6;
  SinkhornDomain domain = SinkhornDomain::Auto;
};

struct TransportPlan {
  Eigen::MatrixXd matrix;
  Eigen::VectorXd row_marginal;
  Eigen::VectorXd col_marginal;
};

struct SinkhornResult {
  /// Transport cost <P, M> of the regularised plan.
  double loss = 0.0;
  /// Value of the regularised objective <P, M> - (1/beta) E(P); sinkhorn_grad is its exact gradient.
  double objective = 0.0;
  TransportPlan plan;
  int iterations = 0;
  bool converged = false;
  double beta = 0.0;
  double marginal_error = 0.0;
  bool log_domain = false;
};

inline Eigen::MatrixXd cost_matrix(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.size() == 0 || b.size() == 0) throw InvalidArgument("cost_matrix: empty measure");
  Eigen::MatrixXd m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = a[i] - b[j];
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d * d;
    }
  }
  return m;
}

namespace detail {

inline double plan_max_violation(const Eigen::MatrixXd& p, const Eigen::VectorXd& r,
                                 const Eigen::VectorXd& c) {
  return std::max((p.rowwise().sum() - r).cwiseAbs().maxCoeff(),
                  (p.colwise().sum().transpose() - c).cwiseAbs().maxCoeff());
}

/// Scaling iterations on K = exp(-beta M). Returns false if the scalings lose finiteness.
inline bool sinkhorn_direct(const Eigen::MatrixXd& cost, const Eigen::VectorXd& r,
                            const Eigen::VectorXd& c, const SinkhornOptions& opts,
                            SinkhornResult& out) {
  // Eigen's vectorised exp clamps very negative arguments instead of returning 0, so a kernel
  // that should underflow has to be caught here.
  if (!(opts.beta * cost.maxCoeff() < 700.0)) return false;
  const Eigen::MatrixXd kernel = (-opts.beta * cost).array().exp().matrix();
  Eigen::VectorXd u = Eigen::VectorXd::Ones(r.size());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(c.size());
  Eigen::VectorXd kv = kernel * v;
  int it = 0;
  double err = std::numeric_limits<double>::infinity();
  while (it < opts.max_iter) {
    u = r.cwiseQuotient(kv);
    v = c.cwiseQuotient(kernel.transpose() * u);
    ++it;
    kv = kernel * v;
    // Columns are exact after the v update; the rows carry the residual.
    err = (u.cwiseProduct(kv) - r).cwiseAbs().maxCoeff();
    if (!std::isfinite(err) || !u.allFinite() || !v.allFinite()) return false;
    if (err < opts.tol) break;
  }
  out.plan.matrix = u.asDiagonal() * kernel * v.asDiagonal();
  out.iterations = it;
  out.converged = err < opts.tol;
  out.log_domain = false;
  return out.plan.matrix.allFinite();
}

inline double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[k * stride]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(x[k * stride] - mx);
  return mx + std::log(s);
}

/// Stabilised iterations on dual potentials f, g. The regularisation is annealed from the
/// cost scale down to 1/beta, warm-starting the potentials at each stage; only the final
/// stage runs to tolerance.
inline void sinkhorn_log(const Eigen::MatrixXd& cost, const Eigen::VectorXd& r,
                         const Eigen::VectorXd& c, const SinkhornOptions& opts,
                         SinkhornResult& out) {
  const auto nr = static_cast<std::size_t>(r.size());
  const auto nc = static_cast<std::size_t>(c.size());
  const double eps_final = 1.0 / opts.beta;
  std::vector<double> f(nr, 0.0), g(nc, 0.0), buf(std::max(nr, nc));
  // Row-major copy so row scans are contiguous.
  std::vector<double> m(nr * nc);
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nc; ++j) {
      m[i * nc + j] = cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  std::vector<double> log_r(nr), log_c(nc);
  for (std::size_t i = 0; i < nr; ++i) log_r[i] = std::log(r[static_cast<Eigen::Index>(i)]);
  for (std::size_t j = 0; j < nc; ++j) log_c[j] = std::log(c[static_cast<Eigen::Index>(j)]);

  auto sweep = [&](double eps) {
    for (std::size_t i = 0; i < nr; ++i) {
      for (std::size_t j = 0; j < nc; ++j) buf[j] = (g[j] - m[i * nc + j]) / eps;
      f[i] = eps * (log_r[i] - log_sum_exp(buf.data(), nc, 1));
    }
    for (std::size_t j = 0; j < nc; ++j) {
      for (std::size_t i = 0; i < nr; ++i) buf[i] = (f[i] - m[i * nc + j]) / eps;
      g[j] = eps * (log_c[j] - log_sum_exp(buf.data(), nr, 1));
    }
  };
  auto row_error = [&](double eps) {
    double e = 0.0;
    for (std::size_t i = 0; i < nr; ++i) {
      for (std::size_t j = 0; j < nc; ++j) buf[j] = (f[i] + g[j] - m[i * nc + j]) / eps;
      e = std::max(e, std::abs(std::exp(log_sum_exp(buf.data(), nc, 1)) -
                               r[static_cast<Eigen::Index>(i)]));
    }
    return e;
  };

  int it = 0;
  constexpr int kStageIters = 8;
  const double top = *std::max_element(m.begin(), m.end());
  for (double eps = top; eps > 2.0 * eps_final && it + kStageIters < opts.max_iter / 2;
       eps *= 0.5) {
    for (int k = 0; k < kStageIters; ++k, ++it) sweep(eps);
  }
  double err = std::numeric_limits<double>::infinity();
  while (it < opts.max_iter) {
    sweep(eps_final);
    ++it;
    err = row_error(eps_final);
    if (err < opts.tol) break;
  }
  out.plan.matrix.resize(static_cast<Eigen::Index>(nr), static_cast<Eigen::Index>(nc));
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nc; ++j) {
      out.plan.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::exp((f[i] + g[j] - m[i * nc + j]) / eps_final);
    }
  }
  out.iterations = it;
  out.converged = err < opts.tol;
  out.log_domain = true;
}

}  // namespace detail

/// Entropy-regularised transport between two equal-size uniform-weight measures.
inline SinkhornResult sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                               const SinkhornOptions& opts = {}) {
  if (a.size() != b.size()) throw InvalidArgument("sinkhorn: measures must have equal size");
  if (a.size() == 0) throw InvalidArgument("sinkhorn: empty measure");
  if (!(opts.beta > 0.0)) throw InvalidArgument("sinkhorn: beta must be > 0");
  if (opts.max_iter < 1) throw InvalidArgument("sinkhorn: max_iter must be >= 1");

  const Eigen::MatrixXd cost = cost_matrix(a, b);
  const auto d = static_cast<Eigen::Index>(a.size());
  const Eigen::VectorXd r = Eigen::VectorXd::Constant(d, a.weight());
  const Eigen::VectorXd c = Eigen::VectorXd::Constant(d, b.weight());

  SinkhornResult res;
  res.beta = opts.beta;
  bool direct_ok = false;
  const bool kernel_safe = opts.beta * cost.maxCoeff() < 600.0;
  if (opts.domain == SinkhornDomain::Direct ||
      (opts.domain == SinkhornDomain::Auto && kernel_safe)) {
    direct_ok = detail::sinkhorn_direct(cost, r, c, opts, res);
    if (!direct_ok && opts.domain == SinkhornDomain::Direct) {
      throw InvalidArgument("sinkhorn: direct-domain kernel underflowed; use the log domain");
    }
  }
  if (!direct_ok) detail::sinkhorn_log(cost, r, c, opts, res);

  const Eigen::MatrixXd& p = res.plan.matrix;
  res.plan.row_marginal = r;
  res.plan.col_marginal = c;
  res.marginal_error = detail::plan_max_violation(p, r, c);
  res.loss = (p.array() * cost.array()).sum();
  double plogp = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double v = p.data()[k];
    if (v > 0.0) plogp += v * std::log(v);
  }
  res.objective = res.loss + plogp / opts.beta;
  return res;
}

/// Gradient of the regularised objective with respect to b.values(), holding the plan fixed:
///   g_j = sum_i P_ij * 2 (b_j - a_i).
inline std::vector<double> sinkhorn_grad(const SinkhornResult& result, const EmpiricalMeasure& a,
                                         const EmpiricalMeasure& b) {
  const Eigen::MatrixXd& p = result.plan.matrix;
  if (p.rows() != static_cast<Eigen::Index>(a.size()) ||
      p.cols() != static_cast<Eigen::Index>(b.size())) {
    throw InvalidArgument("sinkhorn_grad: plan does not match the measures");
  }
  std::vector<double> g(b.size(), 0.0);
  for (std::size_t j = 0; j < b.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      s += p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * 2.0 * (b[j] - a[i]);
    }
    g[j] = s;
  }
  return g;
}

/// Exact optimal transport cost for squared distance in 1-D: mean squared gap of order statistics.
inline double emd_1d_exact(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.size() != b.size()) throw InvalidArgument("emd_1d_exact: measures must have equal size");
  std::vector<double> x(a.values().begin(), a.values().end());
  std::vector<double> y(b.values().begin(), b.values().end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

struct SplitSinkhornResult {
  /// Sum of the per-group transport costs (or the plain cost after a fallback).
  double loss = 0.0;
  double objective = 0.0;
  /// Gradient over b.values(), assembled from the per-group gradients.
  std::vector<double> grad;
  bool fell_back = false;
  int iterations = 0;
  bool converged = true;
};

/// Sinkhorn computed separately on group 0 and group 1 of both measures and summed.
/// Falls back to plain Sinkhorn (with a warning on stderr) when a group is empty or the
/// two sides disagree on a group's size.
inline SplitSinkhornResult split_sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                                          std::span<const std::uint8_t> a_groups,
                                          std::span<const std::uint8_t> b_groups,
                                          const SinkhornOptions& opts = {},
                                          std::ostream* warn = &std::cerr) {
  if (a_groups.size() != a.size() || b_groups.size() != b.size()) {
    throw InvalidArgument("split_sinkhorn: one group label per sample required");
  }
  std::vector<std::size_t> ia[2], ib[2];
  for (std::size_t i = 0; i < a.size(); ++i) ia[a_groups[i] ? 1 : 0].push_back(i);
  for (std::size_t j = 0; j < b.size(); ++j) ib[b_groups[j] ? 1 : 0].push_back(j);

  SplitSinkhornResult out;
  const bool usable = !ia[0].empty() && !ia[1].empty() && ia[0].size() == ib[0].size() &&
                      ia[1].size() == ib[1].size();
  if (!usable) {
    if (warn) {
      *warn << "warning: split_sinkhorn groups unusable (sizes a0=" << ia[0].size()
            << " a1=" << ia[1].size() << " b0=" << ib[0].size() << " b1=" << ib[1].size()
            << "); falling back to plain sinkhorn\n";
    }
    const auto res = sinkhorn(a, b, opts);
    out.loss = res.loss;
    out.objective = res.objective;
    out.grad = sinkhorn_grad(res, a, b);
    out.fell_back = true;
    out.iterations = res.iterations;
    out.converged = res.converged;
    return out;
  }

  out.grad.assign(b.size(), 0.0);
  for (int grp = 0; grp < 2; ++grp) {
    std::vector<double> av, bv;
    for (std::size_t i : ia[grp]) av.push_back(a[i]);
    for (std::size_t j : ib[grp]) bv.push_back(b[j]);
    const EmpiricalMeasure ma(std::move(av)), mb(std::move(bv));
    const auto res = sinkhorn(ma, mb, opts);
    const auto g = sinkhorn_grad(res, ma, mb);
    for (std::size_t k = 0; k < g.size(); ++k) out.grad[ib[grp][k]] = g[k];
    out.loss += res.loss;
    out.objective += res.objective;
    out.iterations = std::max(out.iterations, res.iterations);
    out.converged = out.converged && res.converged;
  }
  return out;
}

}  // namespace cssccnn
