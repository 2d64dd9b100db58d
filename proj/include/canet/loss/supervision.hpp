#pragma once

// Training objectives for the two networks: dynamic confidence supervision,
// the confidence BCE, the confidence-weighted structure loss, and the
// adversarial ablation variant with label perturbation.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "canet/core/ops.hpp"

namespace canet::loss {

inline constexpr double kLogClamp = 1e-7;

enum class LambdaMode { fixed, dynamic };
enum class SupervisionMode { dynamic, adversarial, none };

struct LossConfig {
  LambdaMode lambda_mode = LambdaMode::fixed;
  double lambda = 10.0;
  SupervisionMode supervision = SupervisionMode::dynamic;
  double dice_smoothing = 1.0;
  double perturbation_band = 0.01;

  void validate() const {
    if (lambda_mode == LambdaMode::fixed && !(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(perturbation_band > 0.0 && perturbation_band < 0.5)) {
      throw std::invalid_argument("perturbation band must lie in (0, 0.5)");
    }
    if (!(dice_smoothing >= 0.0)) throw std::invalid_argument("dice smoothing must be >= 0");
  }
};

/// Weight gain for epoch t (1-based): fixed lambda, or min(2 * relu(t - 5), 20).
inline double lambda_schedule(const LossConfig& cfg, int epoch) {
  if (cfg.lambda_mode == LambdaMode::fixed) return cfg.lambda;
  return std::min(2.0 * std::max(epoch - 5, 0), 20.0);
}

/// y (1 - y_hat) + (1 - y) y_hat; equals |y - y_hat| for binary y.
template <typename T>
Tensor<T> dynamic_supervision(const Tensor<T>& y, const Tensor<T>& y_hat) {
  canet::detail::require_same_shape(y.shape(), y_hat.shape(), "dynamic_supervision");
  Tensor<T> out(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (T(1) - y_hat[i]) + (T(1) - y[i]) * y_hat[i];
  return out;
}

/// w = 1 + lambda * c
template <typename T>
Tensor<T> confidence_weight(const Tensor<T>& c, double lambda) {
  Tensor<T> w(c.shape());
  for (std::size_t i = 0; i < c.size(); ++i) w[i] = static_cast<T>(1.0 + lambda * static_cast<double>(c[i]));
  return w;
}

/// |d - 0.5| / 0.5: distance of a discriminator output from indecision.
template <typename T>
Tensor<T> adversarial_confidence(const Tensor<T>& d) {
  Tensor<T> out(d.shape());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = std::abs(d[i] - T(0.5)) / T(0.5);
  return out;
}

/// Relaxes binary labels: foreground to (1 - band, 1), background to (0, band).
template <typename T>
Tensor<T> perturb_labels(const Tensor<T>& y, double band, Rng& rng) {
  if (!(band > 0.0 && band < 0.5)) throw std::invalid_argument("perturbation band must lie in (0, 0.5)");
  Tensor<T> out(y.shape());
  const T one_below = std::nextafter(T(1), T(0));
  const T lo_fg = static_cast<T>(1.0 - band);
  const T hi_bg = static_cast<T>(band);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double u = rng.uniform_open();
    if (y[i] >= T(0.5)) {
      T v = static_cast<T>(1.0 - band * u);
      out[i] = std::clamp(v, std::nextafter(lo_fg, T(1)), one_below);
    } else {
      T v = static_cast<T>(band * u);
      out[i] = std::clamp(v, std::numeric_limits<T>::denorm_min(), std::nextafter(hi_bg, T(0)));
    }
  }
  return out;
}

namespace detail {

template <typename T>
double clamped_log(T v) {
  return std::log(std::max(static_cast<double>(v), kLogClamp));
}

template <typename T>
double bce_term(T p, T t) {
  return -static_cast<double>(t) * clamped_log(p) - (1.0 - static_cast<double>(t)) * clamped_log(T(1) - p);
}

// d bce / d p, zero where the log argument is clamped.
template <typename T>
double bce_grad(T p, T t) {
  const double pd = p, td = t;
  double g = 0.0;
  if (pd > kLogClamp) g -= td / pd;
  if (1.0 - pd > kLogClamp) g += (1.0 - td) / (1.0 - pd);
  return g;
}

}  // namespace detail

/// Pixel-averaged binary cross-entropy with continuous targets in [0, 1].
template <typename T>
Var<T> bce_mean(Tape<T>& tape, const Var<T>& p, const Tensor<T>& target) {
  canet::detail::require_same_shape(p->value.shape(), target.shape(), "bce");
  // NaN targets pass through so the caller's finiteness check can name the loss term.
  for (T t : target.data()) {
    if (t < T(0) || t > T(1)) throw std::invalid_argument("bce: target outside [0, 1]");
  }
  const std::size_t n = target.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += detail::bce_term(p->value[i], target[i]);
  auto out = make_var(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), tape.wants_grad(p));
  if (out->requires_grad) {
    tape.record([p, out, target, n] {
      Tensor<T>& d = p->ensure_grad();
      const double g = static_cast<double>(out->grad[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) d[i] += static_cast<T>(g * detail::bce_grad(p->value[i], target[i]));
    });
  }
  return out;
}

template <typename T>
Var<T> bce_mean(Tape<T>& tape, const Var<T>& p, T constant_target) {
  return bce_mean(tape, p, Tensor<T>(p->value.shape(), constant_target));
}

/// 0.5 * (BCE(c_ini, yc_ini) + BCE(c_ref, yc_ref))
template <typename T>
Var<T> confidence_loss(Tape<T>& tape, const Var<T>& c_ini, const Var<T>& c_ref, const Tensor<T>& yc_ini,
                       const Tensor<T>& yc_ref) {
  return scale(tape, add(tape, bce_mean(tape, c_ini, yc_ini), bce_mean(tape, c_ref, yc_ref)), T(0.5));
}

/// Discriminator objective: predictions labelled 0, perturbed ground truth labelled 1.
template <typename T>
Var<T> adversarial_confidence_loss(Tape<T>& tape, const Var<T>& d_ini, const Var<T>& d_ref, const Var<T>& d_gt) {
  auto fake = scale(tape, add(tape, bce_mean(tape, d_ini, T(0)), bce_mean(tape, d_ref, T(0))), T(0.5));
  return add(tape, fake, bce_mean(tape, d_gt, T(1)));
}

/// Confidence-aware structure loss for one head, averaged over the batch:
///   sum(w * ce) / sum(w) + 1 - (2 sum(w y_hat y) + s) / (sum(w (y_hat + y)) + s)
template <typename T>
Var<T> structure_loss(Tape<T>& tape, const Var<T>& y_hat, const Tensor<T>& y, const Tensor<T>& w,
                      double smoothing = 1.0) {
  const auto& s = y_hat->value.shape();
  canet::detail::require_same_shape(s, y.shape(), "structure_loss target");
  canet::detail::require_same_shape(s, w.shape(), "structure_loss weight");
  const std::size_t N = s.empty() ? 1 : s[0];
  const std::size_t P = y.size() / N;

  struct Sums {
    double wce = 0, w = 0, inter = 0, total = 0;
  };
  std::vector<Sums> sums(N);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    auto& q = sums[n];
    for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
      const double wi = w[i], p = y_hat->value[i], t = y[i];
      q.wce += wi * detail::bce_term(y_hat->value[i], y[i]);
      q.w += wi;
      q.inter += wi * p * t;
      q.total += wi * (p + t);
    }
    loss += q.wce / q.w + 1.0 - (2.0 * q.inter + smoothing) / (q.total + smoothing);
  }
  auto out = make_var(Tensor<T>({1}, static_cast<T>(loss / static_cast<double>(N))), tape.wants_grad(y_hat));
  if (out->requires_grad) {
    tape.record([y_hat, out, y, w, sums = std::move(sums), N, P, smoothing] {
      Tensor<T>& d = y_hat->ensure_grad();
      const double g = static_cast<double>(out->grad[0]) / static_cast<double>(N);
      for (std::size_t n = 0; n < N; ++n) {
        const auto& q = sums[n];
        const double num = 2.0 * q.inter + smoothing, den = q.total + smoothing;
        for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
          const double wi = w[i], t = y[i];
          const double dce = wi * detail::bce_grad(y_hat->value[i], y[i]) / q.w;
          const double ddice = -(2.0 * wi * t * den - num * wi) / (den * den);
          d[i] += static_cast<T>(g * (dce + ddice));
        }
      }
    });
  }
  return out;
}

/// Structure loss averaged over the initial and refined heads.
template <typename T>
Var<T> structure_loss_pair(Tape<T>& tape, const Var<T>& y_ini, const Var<T>& y_ref, const Tensor<T>& y,
                           const Tensor<T>& w_ini, const Tensor<T>& w_ref, double smoothing = 1.0) {
  return scale(tape,
               add(tape, structure_loss(tape, y_ini, y, w_ini, smoothing), structure_loss(tape, y_ref, y, w_ref, smoothing)),
               T(0.5));
}

}  // namespace canet::loss
