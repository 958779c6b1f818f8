#pragma once

// Truncated power-law prior over per-cell crowd counts:
//   p(c) ∝ c^(-alpha) · exp(-lambda · c)   on [1, c_max_cell]
// with a fraction of the probability mass moved uniformly onto [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "cssccnn/error.hpp"
#include "cssccnn/measure.hpp"

namespace cssccnn {

struct PriorSpec {
  double alpha = 2.0;
  double lambda = 0.0;
  double c_max_cell = 0.0;
  /// Probability mass redistributed uniformly onto counts in [0, 1].
  double head_mass_fraction = 0.30;
  /// Number of knots in the tabulated CDF used for inverse sampling.
  std::size_t grid_resolution = 4096;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InvalidArgument("prior alpha must be > 0");
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("prior lambda must be > 0");
    if (!(c_max_cell > 1.0) || !std::isfinite(c_max_cell)) {
      throw InvalidArgument("prior c_max_cell must be > 1");
    }
    if (!(head_mass_fraction >= 0.0 && head_mass_fraction <= 0.5)) {
      throw InvalidArgument("head_mass_fraction must lie in [0, 0.5]");
    }
    if (grid_resolution < 16) throw InvalidArgument("grid_resolution must be at least 16");
  }
};

/// Per-cell maximum count from the full-image maximum: c_fmax / (m · n · s_crop).
inline double derive_cell_max(double c_fmax, double m, double n, double s_crop) {
  if (!(c_fmax > 0.0) || !(m > 0.0) || !(n > 0.0) || !(s_crop > 0.0)) {
    throw InvalidArgument("derive_cell_max: all arguments must be positive");
  }
  return c_fmax / (m * n * s_crop);
}

namespace detail {

/// log of ∫_lo^hi x^(-alpha) exp(-lambda x) dx; hi may be +infinity (then lambda > 0 or alpha > 1).
inline double log_tpl_integral(double alpha, double lambda, double lo, double hi) {
  const double t0 = std::log(lo);
  const double one_minus = 1.0 - alpha;
  auto exponent = [&](double t) { return one_minus * t - lambda * std::exp(t); };

  double t1;
  if (std::isinf(hi)) {
    // Walk out until the integrand has dropped by e^-60 from its peak.
    double peak_t = t0;
    if (one_minus > 0.0 && lambda > 0.0) peak_t = std::max(t0, std::log(one_minus / lambda));
    const double peak = exponent(peak_t);
    t1 = peak_t + 1.0;
    for (int i = 0; i < 4000 && exponent(t1) > peak - 60.0; ++i) t1 += 0.5;
  } else {
    t1 = std::log(hi);
  }
  if (t1 <= t0) return -std::numeric_limits<double>::infinity();

  double peak = std::max(exponent(t0), exponent(t1));
  if (one_minus > 0.0 && lambda > 0.0) {
    const double tp = std::log(one_minus / lambda);
    if (tp > t0 && tp < t1) peak = std::max(peak, exponent(tp));
  }
  auto f = [&](double t) { return std::exp(exponent(t) - peak); };
  // Unit-width panels keep the adaptive rule well conditioned over long ranges.
  double total = 0.0;
  for (double a = t0; a < t1; a += 1.0) {
    const double b = std::min(a + 1.0, t1);
    total += boost::math::quadrature::gauss_kronrod<double, 21>::integrate(f, a, b, 8, 1e-13);
  }
  return peak + std::log(total);
}

}  // namespace detail

/// CDF at c of the un-truncated law c^(-alpha) e^(-lambda c) normalised on [1, inf).
inline double power_law_cdf(double alpha, double lambda, double c) {
  if (c <= 1.0) return 0.0;
  const double log_z = detail::log_tpl_integral(alpha, lambda, 1.0, std::numeric_limits<double>::infinity());
  const double log_tail = detail::log_tpl_integral(alpha, lambda, c, std::numeric_limits<double>::infinity());
  return -std::expm1(log_tail - log_z);
}

/// Tail rate lambda such that CDF(c_max_cell) = 1 - 1/s_images, by bisection in log(lambda).
inline double calibrate_lambda(double alpha, double c_max_cell, double s_images) {
  if (!(alpha > 0.0)) throw InvalidArgument("calibrate_lambda: alpha must be > 0");
  if (!(c_max_cell > 1.0)) throw InvalidArgument("calibrate_lambda: c_max_cell must be > 1");
  if (!(s_images >= 2.0)) throw InvalidArgument("calibrate_lambda: s_images must be >= 2");

  const double target = 1.0 - 1.0 / s_images;
  auto residual = [&](double lambda) { return power_law_cdf(alpha, lambda, c_max_cell) - target; };

  double lo = 1e-6, hi = 10.0;
  double r_lo = residual(lo), r_hi = residual(hi);
  for (int widen = 0; widen < 3 && !(r_lo <= 0.0 && r_hi >= 0.0); ++widen) {
    lo /= 10.0;
    hi *= 10.0;
    r_lo = residual(lo);
    r_hi = residual(hi);
  }
  if (!(r_lo <= 0.0 && r_hi >= 0.0)) {
    throw CalibrationFailure("calibrate_lambda: no sign change in bracket", lo, hi, r_lo, r_hi);
  }
  while (hi - lo > 1e-8 * hi) {
    const double mid = std::sqrt(lo * hi);
    if (residual(mid) < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::sqrt(lo * hi);
}

/// Builds a calibrated spec from the dataset-level knobs.
inline PriorSpec make_prior(double alpha, double c_max_cell, double s_images,
                            double head_mass_fraction = 0.30) {
  PriorSpec spec;
  spec.alpha = alpha;
  spec.c_max_cell = c_max_cell;
  spec.lambda = calibrate_lambda(alpha, c_max_cell, s_images);
  spec.head_mass_fraction = head_mass_fraction;
  spec.validate();
  return spec;
}

/// Tabulated CDF of the prior truncated to [1, c_max_cell], plus the head-mass mixture
/// built on top of it. Between knots the CDF is linear.
class PriorTable {
 public:
  explicit PriorTable(const PriorSpec& spec) : spec_(spec) {
    spec_.validate();
    const std::size_t r = spec_.grid_resolution;
    knots_.resize(r);
    cdf_.assign(r, 0.0);
    const double log_max = std::log(spec_.c_max_cell);
    for (std::size_t k = 0; k < r; ++k) {
      knots_[k] = std::exp(log_max * static_cast<double>(k) / static_cast<double>(r - 1));
    }
    knots_.front() = 1.0;
    knots_.back() = spec_.c_max_cell;

    const double one_minus = 1.0 - spec_.alpha;
    const double lam = spec_.lambda;
    auto f = [&](double t) { return std::exp(one_minus * t - lam * std::exp(t)); };
    for (std::size_t k = 1; k < r; ++k) {
      const double piece = boost::math::quadrature::gauss<double, 8>::integrate(
          f, std::log(knots_[k - 1]), std::log(knots_[k]));
      cdf_[k] = cdf_[k - 1] + piece;
    }
    const double total = cdf_.back();
    for (double& v : cdf_) v /= total;
    cdf_.back() = 1.0;

    head_quantile_ = quantile(spec_.head_mass_fraction);
  }

  const PriorSpec& spec() const noexcept { return spec_; }
  std::span<const double> knots() const noexcept { return knots_; }
  std::span<const double> cdf_values() const noexcept { return cdf_; }

  /// CDF of the truncated power law on [1, c_max_cell].
  double cdf(double c) const {
    if (c <= 1.0) return 0.0;
    if (c >= spec_.c_max_cell) return 1.0;
    const auto it = std::upper_bound(knots_.begin(), knots_.end(), c);
    const std::size_t k = static_cast<std::size_t>(it - knots_.begin());
    const double w = (c - knots_[k - 1]) / (knots_[k] - knots_[k - 1]);
    return cdf_[k - 1] + w * (cdf_[k] - cdf_[k - 1]);
  }

  double quantile(double u) const {
    if (u <= 0.0) return 1.0;
    if (u >= 1.0) return spec_.c_max_cell;
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    const std::size_t k = static_cast<std::size_t>(it - cdf_.begin());
    const double span = cdf_[k] - cdf_[k - 1];
    const double w = span > 0.0 ? (u - cdf_[k - 1]) / span : 0.0;
    return knots_[k - 1] + w * (knots_[k] - knots_[k - 1]);
  }

  /// Count below which the redistributed head mass was taken from.
  double head_quantile() const noexcept { return head_quantile_; }

  double mixture_cdf(double x) const {
    const double h = spec_.head_mass_fraction;
    if (x <= 0.0) return 0.0;
    if (x <= 1.0) return h * x;
    if (x <= head_quantile_) return h;
    return cdf(x);
  }

  double mixture_quantile(double u) const {
    const double h = spec_.head_mass_fraction;
    if (u < h) return u / h;
    return quantile(u);
  }

  /// Mean of the mixture, integrating the piecewise-linear quantile function exactly.
  double mixture_mean() const {
    const double h = spec_.head_mass_fraction;
    double mean = 0.5 * h;
    double prev_u = h, prev_x = quantile(h);
    for (std::size_t k = 0; k < cdf_.size(); ++k) {
      if (cdf_[k] <= h) continue;
      mean += 0.5 * (prev_x + knots_[k]) * (cdf_[k] - prev_u);
      prev_u = cdf_[k];
      prev_x = knots_[k];
    }
    return mean;
  }

 private:
  PriorSpec spec_;
  std::vector<double> knots_;
  std::vector<double> cdf_;
  double head_quantile_ = 1.0;
};

/// Seeded sampler over the head-mass mixture. Reuses one table across draws.
class PriorSampler {
 public:
  PriorSampler(const PriorSpec& spec, std::uint64_t seed) : table_(spec), rng_(seed) {}

  double draw() { return table_.mixture_quantile(unit_(rng_)); }

  EmpiricalMeasure draw(std::size_t n) {
    if (n == 0) throw InvalidArgument("sample_prior: n must be >= 1");
    std::vector<double> v(n);
    for (double& x : v) x = draw();
    return EmpiricalMeasure(std::move(v));
  }

  const PriorTable& table() const noexcept { return table_; }

 private:
  PriorTable table_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

inline EmpiricalMeasure sample_prior(const PriorSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("sample_prior: n must be >= 1");
  PriorSampler sampler(spec, seed);
  return sampler.draw(n);
}

// ---------------------------------------------------------------------------
// Maximum-likelihood fitting.

enum class Family { TruncatedPowerLaw, Pareto, Lognormal };

inline constexpr Family kAllFamilies[] = {Family::TruncatedPowerLaw, Family::Pareto,
                                          Family::Lognormal};

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::TruncatedPowerLaw: return "truncated-power-law";
    case Family::Pareto: return "pareto";
    case Family::Lognormal: return "lognormal";
  }
  return "unknown";
}

inline std::optional<Family> parse_family(std::string_view s) {
  for (Family f : kAllFamilies) {
    if (family_name(f) == s) return f;
  }
  return std::nullopt;
}

struct FitOptions {
  /// Samples below this cutoff are excluded from the fit.
  double x_min = 1.0;
  std::size_t min_samples = 100;
  std::size_t curve_points = 64;
};

struct FitReport {
  Family family = Family::TruncatedPowerLaw;
  /// truncated-power-law: (alpha, lambda); pareto: (alpha, x_min); lognormal: (mu, sigma).
  double param1 = 0.0;
  double param2 = 0.0;
  double log_likelihood = 0.0;
  double x_min = 1.0;
  std::size_t n = 0;
  /// (log count, log density) of the fitted law, sorted by abscissa.
  std::vector<std::pair<double, double>> loglog_curve;

  double log_pdf(double x) const;
};

namespace detail {

/// Maximises a unimodal function on [a, b]; returns (argmax, max).
template <class F>
std::pair<double, double> golden_max(F&& f, double a, double b, double tol) {
  constexpr double kInvPhi = 0.6180339887498949;
  double c = b - kInvPhi * (b - a);
  double d = a + kInvPhi * (b - a);
  double fc = f(c), fd = f(d);
  for (int i = 0; i < 300 && (b - a) > tol; ++i) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(d);
    }
  }
  return fc >= fd ? std::pair{c, fc} : std::pair{d, fd};
}

/// log P(Z > z) for a standard normal.
inline double log_normal_tail(double z) {
  if (z < 25.0) return std::log(0.5 * std::erfc(z / std::sqrt(2.0)));
  const double z2 = z * z;
  return -0.5 * z2 - std::log(z * std::sqrt(2.0 * M_PI)) + std::log1p(-1.0 / z2 + 3.0 / (z2 * z2));
}

struct SampleStats {
  double n = 0, sum_x = 0, sum_log = 0, sum_log2 = 0, max_x = 0;
};

inline double tpl_log_likelihood(const SampleStats& s, double x_min, double alpha, double lambda) {
  const double log_z =
      log_tpl_integral(alpha, lambda, x_min, std::numeric_limits<double>::infinity());
  return -alpha * s.sum_log - lambda * s.sum_x - s.n * log_z;
}

inline double lognormal_log_likelihood(const SampleStats& s, double x_min, double mu, double sigma) {
  const double sq = s.sum_log2 - 2.0 * mu * s.sum_log + s.n * mu * mu;
  const double tail = log_normal_tail((std::log(x_min) - mu) / sigma);
  return -s.sum_log - s.n * std::log(sigma) - 0.5 * s.n * std::log(2.0 * M_PI) -
         sq / (2.0 * sigma * sigma) - s.n * tail;
}

}  // namespace detail

inline double FitReport::log_pdf(double x) const {
  if (x < x_min) return -std::numeric_limits<double>::infinity();
  switch (family) {
    case Family::TruncatedPowerLaw: {
      const double log_z = detail::log_tpl_integral(param1, param2, x_min,
                                                    std::numeric_limits<double>::infinity());
      return -param1 * std::log(x) - param2 * x - log_z;
    }
    case Family::Pareto:
      return std::log(param1 - 1.0) - std::log(x_min) - param1 * std::log(x / x_min);
    case Family::Lognormal: {
      const double z = (std::log(x) - param1) / param2;
      return -0.5 * z * z - std::log(x * param2 * std::sqrt(2.0 * M_PI)) -
             detail::log_normal_tail((std::log(x_min) - param1) / param2);
    }
  }
  return 0.0;
}

/// Maximum-likelihood fit of one family to the samples at or above `opts.x_min`.
inline FitReport fit_mle(const EmpiricalMeasure& samples, Family family, const FitOptions& opts = {}) {
  if (!(opts.x_min > 0.0)) throw InvalidArgument("fit_mle: x_min must be > 0");
  std::vector<double> xs;
  for (double v : samples.values()) {
    if (v >= opts.x_min) xs.push_back(v);
  }
  if (xs.size() < opts.min_samples) {
    throw InvalidArgument("fit_mle: need at least " + std::to_string(opts.min_samples) +
                          " samples at or above x_min, got " + std::to_string(xs.size()));
  }
  const auto [mn, mx] = std::minmax_element(xs.begin(), xs.end());
  if (*mn == *mx) throw FitFailure("fit_mle: degenerate sample (all values equal)");

  detail::SampleStats s;
  s.n = static_cast<double>(xs.size());
  s.max_x = *mx;
  for (double x : xs) {
    const double l = std::log(x);
    s.sum_x += x;
    s.sum_log += l;
    s.sum_log2 += l * l;
  }

  FitReport rep;
  rep.family = family;
  rep.x_min = opts.x_min;
  rep.n = xs.size();

  switch (family) {
    case Family::Pareto: {
      const double excess = s.sum_log - s.n * std::log(opts.x_min);
      if (!(excess > 0.0)) throw FitFailure("fit_mle: pareto fit needs samples above x_min");
      const double alpha = 1.0 + s.n / excess;
      rep.param1 = alpha;
      rep.param2 = opts.x_min;
      rep.log_likelihood = s.n * std::log(alpha - 1.0) - s.n * std::log(opts.x_min) - alpha * excess;
      break;
    }
    case Family::TruncatedPowerLaw: {
      // Jointly concave in (alpha, lambda): profile over alpha, grid-seed then refine log(lambda).
      auto profile = [&](double log_lambda) {
        const double lambda = std::exp(log_lambda);
        return detail::golden_max(
            [&](double a) { return detail::tpl_log_likelihood(s, opts.x_min, a, lambda); }, -6.0,
            12.0, 1e-9);
      };
      const double lo = std::log(1e-8 / opts.x_min), hi = std::log(20.0 / opts.x_min);
      constexpr int kGrid = 48;
      int best = 0;
      double best_ll = -std::numeric_limits<double>::infinity();
      for (int k = 0; k <= kGrid; ++k) {
        const double ll = profile(lo + (hi - lo) * k / kGrid).second;
        if (ll > best_ll) {
          best_ll = ll;
          best = k;
        }
      }
      const double step = (hi - lo) / kGrid;
      const double a = lo + step * std::max(best - 1, 0);
      const double b = lo + step * std::min(best + 1, kGrid);
      const auto [log_lambda, ll] = detail::golden_max(
          [&](double t) { return profile(t).second; }, a, b, 1e-10);
      rep.param2 = std::exp(log_lambda);
      rep.param1 = profile(log_lambda).first;
      rep.log_likelihood = ll;
      break;
    }
    case Family::Lognormal: {
      const double m = s.sum_log / s.n;
      const double var = std::max(s.sum_log2 / s.n - m * m, 1e-12);
      const double sd = std::sqrt(var);
      auto profile = [&](double log_sigma) {
        const double sigma = std::exp(log_sigma);
        const double width = std::max(sd, sigma);
        return detail::golden_max(
            [&](double mu) { return detail::lognormal_log_likelihood(s, opts.x_min, mu, sigma); },
            m - 40.0 * width, m + 5.0 * width, 1e-10 * (1.0 + width));
      };
      const auto [log_sigma, ll] = detail::golden_max(
          [&](double t) { return profile(t).second; }, std::log(sd * 0.02), std::log(sd * 50.0),
          1e-10);
      rep.param2 = std::exp(log_sigma);
      rep.param1 = profile(log_sigma).first;
      rep.log_likelihood = ll;
      break;
    }
  }
  if (!std::isfinite(rep.log_likelihood)) throw FitFailure("fit_mle: non-finite log-likelihood");

  const std::size_t pts = std::max<std::size_t>(opts.curve_points, 2);
  const double l0 = std::log(opts.x_min), l1 = std::log(s.max_x);
  for (std::size_t i = 0; i < pts; ++i) {
    const double lx = l0 + (l1 - l0) * static_cast<double>(i) / static_cast<double>(pts - 1);
    rep.loglog_curve.emplace_back(lx, rep.log_pdf(std::exp(lx)));
  }
  return rep;
}

/// Log-binned empirical density of the samples at or above x_min, as (log count, log density).
inline std::vector<std::pair<double, double>> empirical_loglog(const EmpiricalMeasure& samples,
                                                               double x_min, std::size_t bins = 32) {
  std::vector<double> xs;
  for (double v : samples.values()) {
    if (v >= x_min) xs.push_back(v);
  }
  std::vector<std::pair<double, double>> out;
  if (xs.empty() || bins == 0) return out;
  const double top = *std::max_element(xs.begin(), xs.end());
  if (!(top > x_min)) return out;
  const double l0 = std::log(x_min), l1 = std::log(top) + 1e-12;
  std::vector<double> hist(bins, 0.0);
  for (double x : xs) {
    auto b = static_cast<std::size_t>((std::log(x) - l0) / (l1 - l0) * static_cast<double>(bins));
    hist[std::min(b, bins - 1)] += 1.0;
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (hist[b] == 0.0) continue;
    const double lo = std::exp(l0 + (l1 - l0) * b / bins);
    const double hi = std::exp(l0 + (l1 - l0) * (b + 1) / bins);
    const double density = hist[b] / (static_cast<double>(xs.size()) * (hi - lo));
    out.emplace_back(0.5 * (std::log(lo) + std::log(hi)), std::log(density));
  }
  return out;
}

}  // namespace cssccnn
