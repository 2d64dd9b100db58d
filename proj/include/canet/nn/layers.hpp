#pragma once

#include <string>

#include "canet/core/ops.hpp"
#include "canet/core/optim.hpp"

namespace canet::nn {

/// Whether a forward pass is a training pass (batch statistics, dropout
/// active) and where dropout draws come from.
struct Mode {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         std::size_t stride, std::size_t pad, bool with_bias, Rng& rng)
      : stride_(stride), pad_(pad) {
    weight_ = store.add_param(name + ".weight", he_normal<T>({out, in, k, k}, in * k * k, rng));
    if (with_bias) bias_ = store.add_param(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const { return conv2d(tape, x, weight_, bias_, stride_, pad_); }

  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  Var<T> weight_, bias_;
  std::size_t stride_ = 1, pad_ = 0;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                  std::size_t stride, Rng& rng)
      : stride_(stride) {
    weight_ = store.add_param(name + ".weight", he_normal<T>({in, out, k, k}, in * k * k, rng));
    bias_ = store.add_param(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return conv_transpose2d(tape, x, weight_, bias_, stride_);
  }

 private:
  Var<T> weight_, bias_;
  std::size_t stride_ = 2;
};

template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    gamma_ = store.add_param(name + ".gamma", Tensor<T>({channels}, T(1)));
    shift_ = store.add_param(name + ".shift", Tensor<T>({channels}));
    running_mean_ = store.add_buffer(name + ".running_mean", Tensor<T>({channels}));
    running_var_ = store.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)));
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, const Mode& mode) const {
    return batch_norm(tape, x, gamma_, shift_, running_mean_->value, running_var_->value,
                      BatchNormOptions{mode.training, kMomentum, kEps});
  }

 private:
  Var<T> gamma_, shift_, running_mean_, running_var_;
};

/// conv3x3 (no bias) -> batch norm -> leaky_relu(0.2)
template <typename T>
class ConvBnAct {
 public:
  static constexpr double kSlope = 0.2;

  ConvBnAct() = default;
  ConvBnAct(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t stride,
            Rng& rng)
      : conv_(store, name + ".conv", in, out, 3, stride, 1, false, rng), bn_(store, name + ".bn", out) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, const Mode& mode) const {
    return leaky_relu(tape, bn_(tape, conv_(tape, x), mode), static_cast<T>(kSlope));
  }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
};

/// Residual channel attention block:
///   x + CA(conv3(relu(conv3(x)))),  CA(u) = u * sigmoid(W2 relu(W1 gap(u)))
template <typename T>
class Rcab {
 public:
  Rcab() = default;
  Rcab(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t reduction, Rng& rng)
      : body1_(store, name + ".body1", channels, channels, 3, 1, 1, true, rng),
        body2_(store, name + ".body2", channels, channels, 3, 1, 1, true, rng),
        squeeze_(store, name + ".squeeze", channels, std::max<std::size_t>(1, channels / reduction), 1, 1, 0, true,
                 rng),
        excite_(store, name + ".excite", std::max<std::size_t>(1, channels / reduction), channels, 1, 1, 0, true,
                rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    auto u = body2_(tape, relu(tape, body1_(tape, x)));
    auto gate = sigmoid(tape, excite_(tape, relu(tape, squeeze_(tape, global_avg_pool(tape, u)))));
    return add(tape, x, scale_channels(tape, u, gate));
  }

  /// Exposed for tests that inspect the channel gates.
  Var<T> gates(Tape<T>& tape, const Var<T>& x) const {
    auto u = body2_(tape, relu(tape, body1_(tape, x)));
    return sigmoid(tape, excite_(tape, relu(tape, squeeze_(tape, global_avg_pool(tape, u)))));
  }

 private:
  Conv2d<T> body1_, body2_, squeeze_, excite_;
};

/// x + BN(conv3(leaky_relu(BN(conv3(x)))))
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng)
      : first_(store, name + ".first", channels, channels, 1, rng),
        conv2_(store, name + ".conv2", channels, channels, 3, 1, 1, false, rng),
        bn2_(store, name + ".bn2", channels) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, const Mode& mode) const {
    return add(tape, x, bn2_(tape, conv2_(tape, first_(tape, x, mode)), mode));
  }

 private:
  ConvBnAct<T> first_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
};

}  // namespace canet::nn
