#pragma once

// Building blocks for the convolutional regressor. Activations are stored channel-major per
// pixel: an Act with c channels over an h x w grid is a c x (h*w) column-major matrix, so one
// pixel's channel vector is contiguous.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "cssccnn/error.hpp"
#include "cssccnn/raster.hpp"

namespace cssccnn::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
struct Act {
  int c = 0, h = 0, w = 0;
  Mat<T> x;

  Act() = default;
  Act(int c_, int h_, int w_) : c(c_), h(h_), w(w_), x(Mat<T>::Zero(c_, h_ * w_)) {}
  int pixels() const { return h * w; }
};

/// Grayscale image scaled to [-1, 1] as a one-channel activation.
template <class T>
Act<T> image_to_act(const GrayImage& img) {
  Act<T> a(1, static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < img.size(); ++i) {
    a.x(0, static_cast<Eigen::Index>(i)) = static_cast<T>(img.data[i]) / T(127.5) - T(1);
  }
  return a;
}

// ---- 3x3 same-padding convolution via im2col ----
// Weight matrix is cout x (9 * cin); column k * cin + ci holds tap k = ky * 3 + kx of input
// channel ci, which makes each im2col column a run of nine contiguous channel vectors.

template <class T>
void im2col3(const Act<T>& in, Mat<T>& cols) {
  const int c = in.c, h = in.h, w = in.w;
  cols.resize(9 * c, h * w);
  const T* src = in.x.data();
  T* dst = cols.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      T* col = dst + static_cast<std::ptrdiff_t>(y * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          T* out = col + (ky * 3 + kx) * c;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            std::fill(out, out + c, T(0));
          } else {
            std::memcpy(out, src + static_cast<std::ptrdiff_t>(sy * w + sx) * c, sizeof(T) * c);
          }
        }
      }
    }
  }
}

template <class T>
void col2im3_add(const Mat<T>& cols, Act<T>& din) {
  const int c = din.c, h = din.h, w = din.w;
  T* dst = din.x.data();
  const T* src = cols.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T* col = src + static_cast<std::ptrdiff_t>(y * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          T* out = dst + static_cast<std::ptrdiff_t>(sy * w + sx) * c;
          const T* g = col + (ky * 3 + kx) * c;
          for (int ci = 0; ci < c; ++ci) out[ci] += g[ci];
        }
      }
    }
  }
}

template <class T>
Act<T> conv3_forward(const Mat<T>& weight, const Vec<T>& bias, const Act<T>& in) {
  if (weight.cols() != 9 * in.c) throw ShapeMismatch("conv3: input channels do not match weights");
  Mat<T> cols;
  im2col3(in, cols);
  Act<T> out;
  out.c = static_cast<int>(weight.rows());
  out.h = in.h;
  out.w = in.w;
  out.x.noalias() = weight * cols;
  out.x.colwise() += bias;
  return out;
}

/// Accumulates dW and db; writes dIn when requested. The im2col buffer is rebuilt here rather
/// than kept on the tape, trading a little time for a much smaller tape.
template <class T>
void conv3_backward(const Mat<T>& weight, const Act<T>& in, const Mat<T>& dout, Mat<T>* dweight,
                    Vec<T>* dbias, Act<T>* din) {
  if (dweight || dbias) {
    if (dweight) {
      Mat<T> cols;
      im2col3(in, cols);
      dweight->noalias() += dout * cols.transpose();
    }
    if (dbias) *dbias += dout.rowwise().sum();
  }
  if (din) {
    const Mat<T> dcols = weight.transpose() * dout;
    *din = Act<T>(in.c, in.h, in.w);
    col2im3_add(dcols, *din);
  }
}

template <class T>
void relu_inplace(Act<T>& a) {
  a.x = a.x.cwiseMax(T(0));
}

/// Gradient through a ReLU given its output.
template <class T>
void relu_backward(const Act<T>& out, Mat<T>& grad) {
  grad = (out.x.array() > T(0)).select(grad, T(0));
}

// ---- 2x2 max pooling, stride 2 ----

template <class T>
Act<T> maxpool2_forward(const Act<T>& in, std::vector<int>& argmax) {
  if (in.h % 2 || in.w % 2) throw ShapeMismatch("maxpool2: spatial dims must be even");
  Act<T> out(in.c, in.h / 2, in.w / 2);
  argmax.assign(static_cast<std::size_t>(out.c) * out.pixels(), 0);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      const int p = y * out.w + x;
      const int q[4] = {(2 * y) * in.w + 2 * x, (2 * y) * in.w + 2 * x + 1,
                        (2 * y + 1) * in.w + 2 * x, (2 * y + 1) * in.w + 2 * x + 1};
      for (int ch = 0; ch < in.c; ++ch) {
        int best = q[0];
        T v = in.x(ch, q[0]);
        for (int k = 1; k < 4; ++k) {
          if (in.x(ch, q[k]) > v) {
            v = in.x(ch, q[k]);
            best = q[k];
          }
        }
        out.x(ch, p) = v;
        argmax[static_cast<std::size_t>(p) * out.c + ch] = best;
      }
    }
  }
  return out;
}

template <class T>
Act<T> maxpool2_backward(const Act<T>& in_shape, const std::vector<int>& argmax, const Mat<T>& dout) {
  Act<T> din(in_shape.c, in_shape.h, in_shape.w);
  const int c = in_shape.c;
  for (Eigen::Index p = 0; p < dout.cols(); ++p) {
    for (int ch = 0; ch < c; ++ch) {
      din.x(ch, argmax[static_cast<std::size_t>(p) * c + ch]) += dout(ch, p);
    }
  }
  return din;
}

// ---- classification helpers ----

template <class T>
Vec<T> softmax(const Vec<T>& logits) {
  const T m = logits.maxCoeff();
  Vec<T> e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

/// Cross-entropy of one sample; writes d(loss)/d(logits) when requested.
template <class T>
T cross_entropy(const Vec<T>& logits, int label, Vec<T>* dlogits = nullptr) {
  if (label < 0 || label >= logits.size()) throw InvalidArgument("cross_entropy: label out of range");
  const Vec<T> p = softmax(logits);
  if (dlogits) {
    *dlogits = p;
    (*dlogits)(label) -= T(1);
  }
  return -std::log(std::max(p(label), std::numeric_limits<T>::min()));
}

}  // namespace cssccnn::nn
