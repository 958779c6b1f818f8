#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "cssccnn/error.hpp"

namespace cssccnn {

/// Uniform-weight sample set of non-negative counts (each sample carries mass 1/d).
class EmpiricalMeasure {
 public:
  EmpiricalMeasure() = default;

  explicit EmpiricalMeasure(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw InvalidArgument("empirical measure needs at least one sample");
    for (double v : values_) {
      if (!std::isfinite(v) || v < 0.0) {
        throw InvalidArgument("empirical measure samples must be finite and non-negative");
      }
    }
  }

  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double weight() const noexcept { return 1.0 / static_cast<double>(values_.size()); }

  EmpiricalMeasure scaled(double factor) const {
    std::vector<double> v(values_);
    for (double& x : v) x *= factor;
    return EmpiricalMeasure(std::move(v));
  }

 private:
  std::vector<double> values_;
};

}  // namespace cssccnn
