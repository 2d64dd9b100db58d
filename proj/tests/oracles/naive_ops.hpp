#pragma once

// Straightforward loop implementations used as references for the
// GEMM-based library ops. Flat vectors in NCHW order, double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct Dims {
  std::size_t n, c, h, w;
  std::size_t size() const { return n * c * h * w; }
  std::size_t at(std::size_t a, std::size_t b, std::size_t y, std::size_t x) const { return ((a * c + b) * h + y) * w + x; }
};

// out[n,o,i,j] = b[o] + sum_{c,a,b} x[n,c,i*s+a-p, j*s+b-p] * w[o,c,a,b], zero outside.
inline std::vector<double> conv2d(const std::vector<double>& x, Dims xd, const std::vector<double>& w, std::size_t out_c,
                                  std::size_t k, const std::vector<double>& bias, std::size_t stride, std::size_t pad,
                                  Dims& od) {
  od = {xd.n, out_c, (xd.h + 2 * pad - k) / stride + 1, (xd.w + 2 * pad - k) / stride + 1};
  std::vector<double> out(od.size());
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t i = 0; i < od.h; ++i)
        for (std::size_t j = 0; j < od.w; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < xd.c; ++c)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) {
                const long y = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(xd.h) || xx >= static_cast<long>(xd.w)) continue;
                acc += x[xd.at(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx))] *
                       w[((o * xd.c + c) * k + a) * k + b];
              }
          out[od.at(n, o, i, j)] = acc;
        }
  return out;
}

// Scatter form: every input pixel stamps its weighted kernel at stride s.
inline std::vector<double> conv_transpose2d(const std::vector<double>& x, Dims xd, const std::vector<double>& w,
                                            std::size_t out_c, std::size_t k, const std::vector<double>& bias,
                                            std::size_t stride, Dims& od) {
  od = {xd.n, out_c, (xd.h - 1) * stride + k, (xd.w - 1) * stride + k};
  std::vector<double> out(od.size(), 0.0);
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t c = 0; c < xd.c; ++c)
      for (std::size_t i = 0; i < xd.h; ++i)
        for (std::size_t j = 0; j < xd.w; ++j)
          for (std::size_t o = 0; o < out_c; ++o)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b)
                out[od.at(n, o, i * stride + a, j * stride + b)] +=
                    x[xd.at(n, c, i, j)] * w[((c * out_c + o) * k + a) * k + b];
  if (!bias.empty()) {
    for (std::size_t n = 0; n < od.n; ++n)
      for (std::size_t o = 0; o < out_c; ++o)
        for (std::size_t p = 0; p < od.h * od.w; ++p) out[(n * out_c + o) * od.h * od.w + p] += bias[o];
  }
  return out;
}

inline std::vector<double> max_pool2d(const std::vector<double>& x, Dims xd, std::size_t k) {
  Dims od{xd.n, xd.c, xd.h / k, xd.w / k};
  std::vector<double> out(od.size());
  for (std::size_t n = 0; n < xd.n; ++n)
    for (std::size_t c = 0; c < xd.c; ++c)
      for (std::size_t i = 0; i < od.h; ++i)
        for (std::size_t j = 0; j < od.w; ++j) {
          double m = -INFINITY;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) m = std::max(m, x[xd.at(n, c, i * k + a, j * k + b)]);
          out[od.at(n, c, i, j)] = m;
        }
  return out;
}

// Half-pixel sampling: output pixel centre maps to (i + 0.5) * in / out in
// input pixel units; the two nearest input centres are blended, edges clamp.
inline double sample_axis(double centre, std::size_t in, std::size_t& lo, std::size_t& hi) {
  const double pos = std::clamp(centre - 0.5, 0.0, static_cast<double>(in - 1));
  lo = static_cast<std::size_t>(pos);
  hi = std::min(lo + 1, in - 1);
  return pos - static_cast<double>(lo);
}

inline std::vector<double> bilinear(const std::vector<double>& x, Dims xd, std::size_t oh, std::size_t ow) {
  std::vector<double> out(xd.n * xd.c * oh * ow);
  for (std::size_t p = 0; p < xd.n * xd.c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t y0, y1, x0, x1;
        const double fy = sample_axis((i + 0.5) * static_cast<double>(xd.h) / static_cast<double>(oh), xd.h, y0, y1);
        const double fx = sample_axis((j + 0.5) * static_cast<double>(xd.w) / static_cast<double>(ow), xd.w, x0, x1);
        const double* s = x.data() + p * xd.h * xd.w;
        const double top = s[y0 * xd.w + x0] * (1 - fx) + s[y0 * xd.w + x1] * fx;
        const double bot = s[y1 * xd.w + x0] * (1 - fx) + s[y1 * xd.w + x1] * fx;
        out[(p * oh + i) * ow + j] = top * (1 - fy) + bot * fy;
      }
  return out;
}

// Training-mode normalization with biased batch variance.
inline std::vector<double> batch_norm(const std::vector<double>& x, Dims d, const std::vector<double>& gamma,
                                      const std::vector<double>& beta, double eps) {
  std::vector<double> out(x.size());
  for (std::size_t c = 0; c < d.c; ++c) {
    std::vector<double> v;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) v.push_back(x[d.at(n, c, y, xx)]);
    double mu = 0;
    for (double e : v) mu += e;
    mu /= static_cast<double>(v.size());
    double var = 0;
    for (double e : v) var += (e - mu) * (e - mu);
    var /= static_cast<double>(v.size());
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) {
          const auto k = d.at(n, c, y, xx);
          out[k] = gamma[c] * (x[k] - mu) / std::sqrt(var + eps) + beta[c];
        }
  }
  return out;
}

}  // namespace oracle
