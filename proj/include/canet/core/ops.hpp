#pragma once

// Differentiable operations over NCHW tensors. Every op checks its input
// shapes, computes the forward value eagerly and, when any input needs a
// gradient, records a backward closure on the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "canet/core/autograd.hpp"
#include "canet/core/rng.hpp"
#include "canet/core/tensor.hpp"

namespace canet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T, typename... Inputs>
Var<T> make_output(const Tape<T>& tape, Shape shape, const Inputs&... inputs) {
  return make_var(Tensor<T>(std::move(shape)), tape.wants_grad(inputs...));
}

inline std::ptrdiff_t sidx(std::size_t v) { return static_cast<std::ptrdiff_t>(v); }

/// Window geometry shared by convolution, its transpose and im2col.
struct ConvGeom {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;  // column grid
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ow * stride + k - pad lies inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_cols(std::size_t k, const ConvGeom& g) {
  const std::ptrdiff_t W = sidx(g.width), s = sidx(g.stride), off = sidx(k) - sidx(g.pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = W - off <= 0 ? 0 : (W - off + s - 1) / s;
  hi = std::min(hi, sidx(g.out_w));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col is rows() x cols(), row-major.
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::ptrdiff_t H = sidx(g.height), W = sidx(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const auto [lo, hi] = valid_cols(kj, g);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = sidx(oh * g.stride + ki) - sidx(g.pad);
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= H) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* src = img + (sidx(c) * H + ih) * W;
          const std::ptrdiff_t off = sidx(kj) - sidx(g.pad);
          std::fill(row, row + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + sidx(lo) + off, src + sidx(hi) + off, row + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = src[sidx(ow * g.stride) + off];
          }
          std::fill(row + hi, row + g.out_w, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::ptrdiff_t H = sidx(g.height), W = sidx(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const auto [lo, hi] = valid_cols(kj, g);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = sidx(oh * g.stride + ki) - sidx(g.pad);
          if (ih < 0 || ih >= H) continue;
          const std::ptrdiff_t off = sidx(kj) - sidx(g.pad);
          T* dst = img + (sidx(c) * H + ih) * W;
          const T* row = src + oh * g.out_w;
          if (g.stride == 1) {
            T* d = dst + sidx(lo) + off;
            for (std::size_t ow = lo; ow < hi; ++ow) *d++ += row[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[sidx(ow * g.stride) + off] += row[ow];
          }
        }
      }
    }
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline bool is_pointwise_1x1(const ConvGeom& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

template <typename T>
void add_bias_grad(const Tensor<T>& dy, Tensor<T>& db) {
  const std::size_t N = dy.dim(0), C = dy.dim(1), P = dy.dim(2) * dy.dim(3);
  for (std::size_t c = 0; c < C; ++c) {
    T acc = T(0);
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = dy.raw() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) acc += p[i];
    }
    db[c] += acc;
  }
}

}  // namespace detail

/// 2-D cross-correlation. weight is OIHW; bias (length O) may be null.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1,
              std::size_t pad = 0) {
  const auto& xs = x->value.shape();
  const auto& ws = weight->value.shape();
  require_rank4(xs, "conv2d input");
  require_rank4(ws, "conv2d weight");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: input " + to_string(xs) + " has " + std::to_string(xs[1]) +
                     " channels but weight " + to_string(ws) + " expects " + std::to_string(ws[1]));
  }
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3]) {
    throw ShapeError("conv2d: kernel " + to_string(ws) + " larger than padded input " + to_string(xs));
  }
  if (bias && bias->value.size() != ws[0]) {
    throw ShapeError("conv2d: bias " + to_string(bias->value.shape()) + " does not match weight " + to_string(ws));
  }
  const std::size_t N = xs[0], O = ws[0];
  detail::ConvGeom g{xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad, 0, 0};
  g.out_h = (xs[2] + 2 * pad - ws[2]) / stride + 1;
  g.out_w = (xs[3] + 2 * pad - ws[3]) / stride + 1;
  const std::size_t K = g.rows(), P = g.cols();
  const std::size_t in_stride = xs[1] * xs[2] * xs[3];

  auto out = detail::make_output(tape, {N, O, g.out_h, g.out_w}, x, weight, bias);
  const bool direct = detail::is_pointwise_1x1(g);
  std::vector<T> col(direct ? 0 : K * P);
  detail::ConstMatMap<T> wm(weight->value.raw(), detail::sidx(O), detail::sidx(K));
  for (std::size_t n = 0; n < N; ++n) {
    const T* src = x->value.raw() + n * in_stride;
    if (!direct) detail::im2col(src, g, col.data());
    detail::ConstMatMap<T> cm(direct ? src : col.data(), detail::sidx(K), detail::sidx(P));
    detail::MatMap<T> om(out->value.raw() + n * O * P, detail::sidx(O), detail::sidx(P));
    om.noalias() = wm * cm;
    if (bias) {
      for (std::size_t o = 0; o < O; ++o) om.row(detail::sidx(o)).array() += bias->value[o];
    }
  }

  if (out->requires_grad) {
    tape.record([x, weight, bias, out, g, N, O, K, P, in_stride, direct] {
      const Tensor<T>& dy = out->grad;
      std::vector<T> col(direct ? 0 : K * P);
      std::vector<T> dcol(direct ? 0 : K * P);
      detail::ConstMatMap<T> wm(weight->value.raw(), detail::sidx(O), detail::sidx(K));
      for (std::size_t n = 0; n < N; ++n) {
        detail::ConstMatMap<T> dym(dy.raw() + n * O * P, detail::sidx(O), detail::sidx(P));
        if (weight->requires_grad) {
          const T* src = x->value.raw() + n * in_stride;
          if (!direct) detail::im2col(src, g, col.data());
          detail::ConstMatMap<T> cm(direct ? src : col.data(), detail::sidx(K), detail::sidx(P));
          detail::MatMap<T> dwm(weight->ensure_grad().raw(), detail::sidx(O), detail::sidx(K));
          dwm.noalias() += dym * cm.transpose();
        }
        if (x->requires_grad) {
          T* dx = x->ensure_grad().raw() + n * in_stride;
          if (direct) {
            detail::MatMap<T> dxm(dx, detail::sidx(K), detail::sidx(P));
            dxm.noalias() += wm.transpose() * dym;
          } else {
            detail::MatMap<T> dcm(dcol.data(), detail::sidx(K), detail::sidx(P));
            dcm.noalias() = wm.transpose() * dym;
            detail::col2im(dcol.data(), g, dx);
          }
        }
      }
      if (bias && bias->requires_grad) detail::add_bias_grad(dy, bias->ensure_grad());
    });
  }
  return out;
}

/// Transposed convolution (no padding). weight is laid out I x O x KH x KW.
/// Output extent is (H - 1) * stride + KH; this is the adjoint of conv2d with
/// the same weight, stride and zero padding.
template <typename T>
Var<T> conv_transpose2d(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride = 2) {
  const auto& xs = x->value.shape();
  const auto& ws = weight->value.shape();
  require_rank4(xs, "conv_transpose2d input");
  require_rank4(ws, "conv_transpose2d weight");
  if (stride < 1) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
  if (xs[1] != ws[0]) {
    throw ShapeError("conv_transpose2d: input " + to_string(xs) + " has " + std::to_string(xs[1]) +
                     " channels but weight " + to_string(ws) + " expects " + std::to_string(ws[0]));
  }
  if (bias && bias->value.size() != ws[1]) {
    throw ShapeError("conv_transpose2d: bias " + to_string(bias->value.shape()) + " does not match weight " +
                     to_string(ws));
  }
  const std::size_t N = xs[0], Cin = xs[1], Cout = ws[1];
  const std::size_t OH = (xs[2] - 1) * stride + ws[2];
  const std::size_t OW = (xs[3] - 1) * stride + ws[3];
  // Geometry of the equivalent forward convolution on the output image.
  const detail::ConvGeom g{Cout, OH, OW, ws[2], ws[3], stride, 0, xs[2], xs[3]};
  const std::size_t K = g.rows(), P = g.cols();

  auto out = detail::make_output(tape, {N, Cout, OH, OW}, x, weight, bias);
  std::vector<T> col(K * P);
  detail::ConstMatMap<T> wm(weight->value.raw(), detail::sidx(Cin), detail::sidx(K));
  for (std::size_t n = 0; n < N; ++n) {
    detail::ConstMatMap<T> xm(x->value.raw() + n * Cin * P, detail::sidx(Cin), detail::sidx(P));
    detail::MatMap<T> cm(col.data(), detail::sidx(K), detail::sidx(P));
    cm.noalias() = wm.transpose() * xm;
    T* dst = out->value.raw() + n * Cout * OH * OW;
    detail::col2im(col.data(), g, dst);
    if (bias) {
      for (std::size_t c = 0; c < Cout; ++c) {
        T* p = dst + c * OH * OW;
        for (std::size_t i = 0; i < OH * OW; ++i) p[i] += bias->value[c];
      }
    }
  }

  if (out->requires_grad) {
    tape.record([x, weight, bias, out, g, N, Cin, Cout, K, P, OH, OW] {
      const Tensor<T>& dy = out->grad;
      std::vector<T> dcol(K * P);
      detail::ConstMatMap<T> wm(weight->value.raw(), detail::sidx(Cin), detail::sidx(K));
      detail::ConstMatMap<T> dcm(dcol.data(), detail::sidx(K), detail::sidx(P));
      for (std::size_t n = 0; n < N; ++n) {
        detail::im2col(dy.raw() + n * Cout * OH * OW, g, dcol.data());
        if (x->requires_grad) {
          detail::MatMap<T> dxm(x->ensure_grad().raw() + n * Cin * P, detail::sidx(Cin), detail::sidx(P));
          dxm.noalias() += wm * dcm;
        }
        if (weight->requires_grad) {
          detail::ConstMatMap<T> xm(x->value.raw() + n * Cin * P, detail::sidx(Cin), detail::sidx(P));
          detail::MatMap<T> dwm(weight->ensure_grad().raw(), detail::sidx(Cin), detail::sidx(K));
          dwm.noalias() += xm * dcm.transpose();
        }
      }
      if (bias && bias->requires_grad) detail::add_bias_grad(dy, bias->ensure_grad());
    });
  }
  return out;
}

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization. In training mode statistics come from the
/// batch (over N, H, W) and the running buffers are updated by EMA.
template <typename T>
Var<T> batch_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& shift, Tensor<T>& running_mean,
                  Tensor<T>& running_var, const BatchNormOptions& opt = {}) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "batch_norm input");
  const std::size_t N = xs[0], C = xs[1], P = xs[2] * xs[3];
  for (const auto* t : {&gamma->value, &shift->value, &running_mean, &running_var}) {
    if (t->size() != C) {
      throw ShapeError("batch_norm: per-channel tensor " + to_string(t->shape()) + " does not match input " +
                       to_string(xs));
    }
  }
  const double M = static_cast<double>(N * P);
  std::vector<T> mean(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (opt.training) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x->value.raw() + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) s += p[i];
      }
      const double mu = s / M;
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x->value.raw() + (n * C + c) * P;
        for (std::size_t i = 0; i < P; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / M;
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = M > 1 ? var * M / (M - 1) : var;
      running_mean[c] = static_cast<T>((1 - opt.momentum) * running_mean[c] + opt.momentum * mu);
      running_var[c] = static_cast<T>((1 - opt.momentum) * running_var[c] + opt.momentum * unbiased);
    } else {
      mean[c] = running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + opt.eps));
    }
  }

  auto out = detail::make_output(tape, xs, x, gamma, shift);
  Tensor<T> xhat(xs);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * P;
      const T g = gamma->value[c], b = shift->value[c];
      for (std::size_t i = 0; i < P; ++i) {
        const T h = (x->value[off + i] - mean[c]) * invstd[c];
        xhat[off + i] = h;
        out->value[off + i] = g * h + b;
      }
    }
  }

  if (out->requires_grad) {
    tape.record([x, gamma, shift, out, xhat = std::move(xhat), invstd = std::move(invstd), N, C, P, M,
                 training = opt.training] {
      const Tensor<T>& dy = out->grad;
      for (std::size_t c = 0; c < C; ++c) {
        double sdy = 0.0, sdyx = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * P;
          for (std::size_t i = 0; i < P; ++i) {
            sdy += dy[off + i];
            sdyx += dy[off + i] * xhat[off + i];
          }
        }
        if (gamma->requires_grad) gamma->ensure_grad()[c] += static_cast<T>(sdyx);
        if (shift->requires_grad) shift->ensure_grad()[c] += static_cast<T>(sdy);
        if (!x->requires_grad) continue;
        Tensor<T>& dx = x->ensure_grad();
        const double k = static_cast<double>(gamma->value[c]) * invstd[c];
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * P;
          for (std::size_t i = 0; i < P; ++i) {
            if (training) {
              dx[off + i] += static_cast<T>(k * (dy[off + i] - sdy / M - xhat[off + i] * sdyx / M));
            } else {
              dx[off + i] += static_cast<T>(k * dy[off + i]);
            }
          }
        }
      }
    });
  }
  return out;
}

/// max(x, slope * x); the positive branch owns the subgradient at 0.
template <typename T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& x, T slope) {
  if (!(slope >= T(0) && slope < T(1))) throw std::invalid_argument("leaky_relu: slope must lie in [0, 1)");
  auto out = detail::make_output(tape, x->value.shape(), x);
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x->value[i];
    out->value[i] = v >= T(0) ? v : slope * v;
  }
  if (auto* trace = active_branch_trace) {
    for (std::size_t i = 0; i < n; ++i) trace->mix(x->value[i] >= T(0));
  }
  if (out->requires_grad) {
    tape.record([x, out, slope, n] {
      Tensor<T>& dx = x->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) dx[i] += x->value[i] >= T(0) ? out->grad[i] : slope * out->grad[i];
    });
  }
  return out;
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  return leaky_relu(tape, x, T(0));
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where the exact value rounds to an endpoint.
template <typename T>
T stable_sigmoid(T v) {
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  T s;
  if (v >= T(0)) {
    s = T(1) / (T(1) + std::exp(-v));
  } else {
    const T e = std::exp(v);
    s = e / (T(1) + e);
  }
  return std::clamp(s, lo, hi);
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  auto out = detail::make_output(tape, x->value.shape(), x);
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = stable_sigmoid(x->value[i]);
  if (out->requires_grad) {
    tape.record([x, out, n] {
      Tensor<T>& dx = x->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T s = out->value[i];
        dx[i] += out->grad[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

/// Inverted dropout. Eval mode and p == 0 return the input node itself.
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const std::size_t n = x->value.size();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(n);
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  auto out = detail::make_output(tape, x->value.shape(), x);
  for (std::size_t i = 0; i < n; ++i) out->value[i] = x->value[i] * mask[i];
  if (out->requires_grad) {
    tape.record([x, out, mask = std::move(mask), n] {
      Tensor<T>& dx = x->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) dx[i] += out->grad[i] * mask[i];
    });
  }
  return out;
}

namespace detail {

struct LerpIndex {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel (align_corners = false) sampling with edge clamping.
inline std::vector<LerpIndex> bilinear_axis(std::size_t in, std::size_t out) {
  std::vector<LerpIndex> idx(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    idx[i] = {i0, i1, src - static_cast<double>(i0)};
  }
  return idx;
}

}  // namespace detail

template <typename T>
Var<T> bilinear_resize(Tape<T>& tape, const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "bilinear_resize input");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output size must be >= 1");
  if (xs[2] == out_h && xs[3] == out_w) return x;
  const std::size_t NC = xs[0] * xs[1], H = xs[2], W = xs[3];
  auto rows = detail::bilinear_axis(H, out_h);
  auto cols = detail::bilinear_axis(W, out_w);
  auto out = detail::make_output(tape, {xs[0], xs[1], out_h, out_w}, x);
  for (std::size_t p = 0; p < NC; ++p) {
    const T* src = x->value.raw() + p * H * W;
    T* dst = out->value.raw() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& r = rows[i];
      const T fy = static_cast<T>(r.frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& c = cols[j];
        const T fx = static_cast<T>(c.frac);
        const T top = (T(1) - fx) * src[r.i0 * W + c.i0] + fx * src[r.i0 * W + c.i1];
        const T bot = (T(1) - fx) * src[r.i1 * W + c.i0] + fx * src[r.i1 * W + c.i1];
        dst[i * out_w + j] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  if (out->requires_grad) {
    tape.record([x, out, rows = std::move(rows), cols = std::move(cols), NC, H, W, out_h, out_w] {
      Tensor<T>& dx = x->ensure_grad();
      for (std::size_t p = 0; p < NC; ++p) {
        T* d = dx.raw() + p * H * W;
        const T* g = out->grad.raw() + p * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const auto& r = rows[i];
          const T fy = static_cast<T>(r.frac);
          for (std::size_t j = 0; j < out_w; ++j) {
            const auto& c = cols[j];
            const T fx = static_cast<T>(c.frac);
            const T v = g[i * out_w + j];
            d[r.i0 * W + c.i0] += (T(1) - fy) * (T(1) - fx) * v;
            d[r.i0 * W + c.i1] += (T(1) - fy) * fx * v;
            d[r.i1 * W + c.i0] += fy * (T(1) - fx) * v;
            d[r.i1 * W + c.i1] += fy * fx * v;
          }
        }
      }
    });
  }
  return out;
}

/// Non-overlapping k x k max pooling; ties resolve to the first element in
/// row-major order.
template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, std::size_t k = 2) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "max_pool2d input");
  if (k < 1 || xs[2] % k != 0 || xs[3] % k != 0) {
    throw ShapeError("max_pool2d: input " + to_string(xs) + " not divisible by window " + std::to_string(k));
  }
  const std::size_t NC = xs[0] * xs[1], H = xs[2], W = xs[3], OH = H / k, OW = W / k;
  auto out = detail::make_output(tape, {xs[0], xs[1], OH, OW}, x);
  std::vector<std::size_t> argmax(out->value.size());
  for (std::size_t p = 0; p < NC; ++p) {
    const T* src = x->value.raw() + p * H * W;
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        std::size_t best = (i * k) * W + j * k;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) {
            const std::size_t idx = (i * k + a) * W + j * k + b;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (p * OH + i) * OW + j;
        out->value[o] = src[best];
        argmax[o] = p * H * W + best;
      }
    }
  }
  if (auto* trace = active_branch_trace) {
    for (auto a : argmax) trace->mix(a);
  }
  if (out->requires_grad) {
    tape.record([x, out, argmax = std::move(argmax)] {
      Tensor<T>& dx = x->ensure_grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += out->grad[o];
    });
  }
  return out;
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const auto& s0 = inputs.front()->value.shape();
  require_rank4(s0, "concat_channels input");
  if (inputs.size() == 1) return inputs.front();
  std::size_t C = 0;
  bool any_grad = false;
  for (const auto& in : inputs) {
    const auto& s = in->value.shape();
    require_rank4(s, "concat_channels input");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    }
    C += s[1];
    any_grad = any_grad || in->requires_grad;
  }
  const std::size_t N = s0[0], P = s0[2] * s0[3];
  auto out = make_var(Tensor<T>({N, C, s0[2], s0[3]}), tape.recording() && any_grad);
  std::size_t c0 = 0;
  for (const auto& in : inputs) {
    const std::size_t ci = in->value.dim(1);
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(in->value.raw() + n * ci * P, ci * P, out->value.raw() + (n * C + c0) * P);
    }
    c0 += ci;
  }
  if (out->requires_grad) {
    tape.record([inputs, out, N, C, P] {
      std::size_t c0 = 0;
      for (const auto& in : inputs) {
        const std::size_t ci = in->value.dim(1);
        if (in->requires_grad) {
          Tensor<T>& d = in->ensure_grad();
          for (std::size_t n = 0; n < N; ++n) {
            const T* g = out->grad.raw() + (n * C + c0) * P;
            T* dst = d.raw() + n * ci * P;
            for (std::size_t i = 0; i < ci * P; ++i) dst[i] += g[i];
          }
        }
        c0 += ci;
      }
    });
  }
  return out;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value.shape(), b->value.shape(), "add");
  auto out = detail::make_output(tape, a->value.shape(), a, b);
  const std::size_t n = a->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad) {
    tape.record([a, b, out, n] {
      for (const auto* in : {&a, &b}) {
        if (!(*in)->requires_grad) continue;
        Tensor<T>& d = (*in)->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) d[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value.shape(), b->value.shape(), "mul");
  auto out = detail::make_output(tape, a->value.shape(), a, b);
  const std::size_t n = a->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad) {
    tape.record([a, b, out, n] {
      if (a->requires_grad) {
        Tensor<T>& d = a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) d[i] += out->grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        Tensor<T>& d = b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) d[i] += out->grad[i] * a->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T s) {
  auto out = detail::make_output(tape, x->value.shape(), x);
  const std::size_t n = x->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = s * x->value[i];
  if (out->requires_grad) {
    tape.record([x, out, s, n] {
      Tensor<T>& d = x->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) d[i] += s * out->grad[i];
    });
  }
  return out;
}

/// Elementwise maximum; ties route the gradient to the first argument.
template <typename T>
Var<T> maximum(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value.shape(), b->value.shape(), "maximum");
  auto out = detail::make_output(tape, a->value.shape(), a, b);
  const std::size_t n = a->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = std::max(a->value[i], b->value[i]);
  if (auto* trace = active_branch_trace) {
    for (std::size_t i = 0; i < n; ++i) trace->mix(a->value[i] >= b->value[i]);
  }
  if (out->requires_grad) {
    tape.record([a, b, out, n] {
      for (std::size_t i = 0; i < n; ++i) {
        const bool first = a->value[i] >= b->value[i];
        const Var<T>& dst = first ? a : b;
        if (dst->requires_grad) dst->ensure_grad()[i] += out->grad[i];
      }
    });
  }
  return out;
}

/// x (N x C x H x W) scaled by per-channel gates g (N x C x 1 x 1).
template <typename T>
Var<T> scale_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& g) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "scale_channels input");
  if (g->value.shape() != Shape{xs[0], xs[1], 1, 1}) {
    throw ShapeError("scale_channels: gate " + to_string(g->value.shape()) + " does not match " + to_string(xs));
  }
  const std::size_t NC = xs[0] * xs[1], P = xs[2] * xs[3];
  auto out = detail::make_output(tape, xs, x, g);
  for (std::size_t p = 0; p < NC; ++p) {
    for (std::size_t i = 0; i < P; ++i) out->value[p * P + i] = x->value[p * P + i] * g->value[p];
  }
  if (out->requires_grad) {
    tape.record([x, g, out, NC, P] {
      for (std::size_t p = 0; p < NC; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < P; ++i) {
          if (x->requires_grad) x->ensure_grad()[p * P + i] += out->grad[p * P + i] * g->value[p];
          acc += out->grad[p * P + i] * x->value[p * P + i];
        }
        if (g->requires_grad) g->ensure_grad()[p] += acc;
      }
    });
  }
  return out;
}

/// x (N x C x H x W) multiplied by a spatial map a (N x 1 x H x W) broadcast over channels.
template <typename T>
Var<T> scale_spatial(Tape<T>& tape, const Var<T>& x, const Var<T>& a) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "scale_spatial input");
  if (a->value.shape() != Shape{xs[0], 1, xs[2], xs[3]}) {
    throw ShapeError("scale_spatial: map " + to_string(a->value.shape()) + " does not match " + to_string(xs));
  }
  const std::size_t N = xs[0], C = xs[1], P = xs[2] * xs[3];
  auto out = detail::make_output(tape, xs, x, a);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < P; ++i) {
        out->value[(n * C + c) * P + i] = x->value[(n * C + c) * P + i] * a->value[n * P + i];
      }
    }
  }
  if (out->requires_grad) {
    tape.record([x, a, out, N, C, P] {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < P; ++i) {
            const std::size_t k = (n * C + c) * P + i;
            if (x->requires_grad) x->ensure_grad()[k] += out->grad[k] * a->value[n * P + i];
            if (a->requires_grad) a->ensure_grad()[n * P + i] += out->grad[k] * x->value[k];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, const Var<T>& x) {
  const auto& xs = x->value.shape();
  require_rank4(xs, "global_avg_pool input");
  const std::size_t NC = xs[0] * xs[1], P = xs[2] * xs[3];
  auto out = detail::make_output(tape, {xs[0], xs[1], 1, 1}, x);
  for (std::size_t p = 0; p < NC; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < P; ++i) acc += x->value[p * P + i];
    out->value[p] = acc / static_cast<T>(P);
  }
  if (out->requires_grad) {
    tape.record([x, out, NC, P] {
      Tensor<T>& d = x->ensure_grad();
      for (std::size_t p = 0; p < NC; ++p) {
        const T g = out->grad[p] / static_cast<T>(P);
        for (std::size_t i = 0; i < P; ++i) d[p * P + i] += g;
      }
    });
  }
  return out;
}

template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
  auto out = detail::make_output(tape, {1}, x);
  T acc = T(0);
  for (T v : x->value.data()) acc += v;
  out->value[0] = acc;
  if (out->requires_grad) {
    tape.record([x, out] {
      Tensor<T>& d = x->ensure_grad();
      for (auto& v : d.data()) v += out->grad[0];
    });
  }
  return out;
}

template <typename T>
Var<T> mean(Tape<T>& tape, const Var<T>& x) {
  return scale(tape, sum(tape, x), T(1) / static_cast<T>(x->value.size()));
}

}  // namespace canet
