#pragma once

#include <stdexcept>
#include <string>

namespace cssccnn {

/// Precondition violated by a caller-supplied argument.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor or raster shapes do not line up.
class ShapeMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// The tail-rate root find could not bracket a solution.
class CalibrationFailure : public std::runtime_error {
 public:
  CalibrationFailure(const std::string& what, double lo, double hi, double residual_lo,
                     double residual_hi)
      : std::runtime_error(what + " [bracket " + std::to_string(lo) + ", " + std::to_string(hi) +
                           "; residuals " + std::to_string(residual_lo) + ", " +
                           std::to_string(residual_hi) + "]"),
        lo_(lo),
        hi_(hi),
        residual_lo_(residual_lo),
        residual_hi_(residual_hi) {}

  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  double residual_lo() const noexcept { return residual_lo_; }
  double residual_hi() const noexcept { return residual_hi_; }

 private:
  double lo_, hi_, residual_lo_, residual_hi_;
};

class FitFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be read or written; the message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// backward() called with a tape recorded against different parameters.
class StaleTape : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace cssccnn
