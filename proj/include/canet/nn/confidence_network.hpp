#pragma once

// UNet confidence estimator. Input is concat(image, prediction); output is a
// one-channel map in (0, 1) where high values mark likely-wrong pixels.

#include <array>
#include <stdexcept>
#include <string>

#include "canet/nn/layers.hpp"

namespace canet::nn {

struct ConfConfig {
  std::size_t image_size = 64;
  std::array<std::size_t, 5> widths{8, 16, 32, 32, 32};
  double dropout = 0.5;
};

template <typename T>
class ConfidenceNetwork {
 public:
  static constexpr std::size_t kLevels = 5;

  ConfidenceNetwork() = default;
  ConfidenceNetwork(ParamStore<T>& store, const ConfConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.image_size == 0 || cfg.image_size % 32 != 0) {
      throw std::invalid_argument("confidence network: image size " + std::to_string(cfg.image_size) +
                                  " must be a positive multiple of 32");
    }
    const auto& w = cfg.widths;
    std::size_t in = 4;
    for (std::size_t l = 0; l < kLevels; ++l) {
      const std::string name = "conf.down" + std::to_string(l + 1);
      down_[l].a = ConvBnAct<T>(store, name + ".a", in, w[l], 1, rng);
      down_[l].b = ConvBnAct<T>(store, name + ".b", w[l], w[l], 1, rng);
      in = w[l];
    }
    for (std::size_t l = kLevels; l-- > 0;) {
      const std::string name = "conf.up" + std::to_string(l + 1);
      const std::size_t below = l + 1 == kLevels ? w[l] : w[l + 1];
      up_[l].tconv = ConvTranspose2d<T>(store, name + ".tconv", below, w[l], 2, 2, rng);
      up_[l].a = ConvBnAct<T>(store, name + ".a", 2 * w[l], w[l], 1, rng);
      up_[l].b = ConvBnAct<T>(store, name + ".b", w[l], w[l], 1, rng);
    }
    head_ = Conv2d<T>(store, "conf.head", w[0], 1, 1, 1, 0, true, rng);
    head_.weight()->value.fill(T(0));
  }

  const ConfConfig& config() const noexcept { return cfg_; }

  /// Level 1 keeps resolution; levels 2..5 open with a 2x2 max-pool.
  Var<T> down_block(Tape<T>& tape, const Var<T>& input, std::size_t level, const Mode& mode) const {
    if (level < 1 || level > kLevels) throw std::out_of_range("down_block level must be in 1..5");
    const auto& blk = down_[level - 1];
    Var<T> x = level == 1 ? input : max_pool2d(tape, input, 2);
    x = blk.b(tape, blk.a(tape, x, mode), mode);
    return apply_dropout(tape, x, mode);
  }

  /// concat(skip, dropout(tconv(below))) -> two conv blocks -> dropout.
  Var<T> up_block(Tape<T>& tape, const Var<T>& skip, const Var<T>& below, std::size_t level, const Mode& mode) const {
    if (level < 1 || level > kLevels) throw std::out_of_range("up_block level must be in 1..5");
    const auto& blk = up_[level - 1];
    auto up = apply_dropout(tape, blk.tconv(tape, below), mode);
    const auto& ss = skip->value.shape();
    const auto& us = up->value.shape();
    if (ss[2] != us[2] || ss[3] != us[3]) {
      throw ShapeError("up_block: upsampled " + to_string(us) + " does not match skip " + to_string(ss));
    }
    auto x = concat_channels(tape, {skip, up});
    x = blk.b(tape, blk.a(tape, x, mode), mode);
    return apply_dropout(tape, x, mode);
  }

  /// `prediction` must be detached from the COD tape by the caller.
  Var<T> operator()(Tape<T>& tape, const Var<T>& image, const Var<T>& prediction, const Mode& mode) const {
    const auto& is = image->value.shape();
    const auto& ps = prediction->value.shape();
    require_rank4(is, "confidence network image");
    require_rank4(ps, "confidence network prediction");
    if (is[1] != 3 || is[2] != cfg_.image_size || is[3] != cfg_.image_size || ps[0] != is[0] || ps[1] != 1 ||
        ps[2] != is[2] || ps[3] != is[3]) {
      throw ShapeError("confidence network: image " + to_string(is) + " / prediction " + to_string(ps) +
                       " do not form a valid input at size " + std::to_string(cfg_.image_size));
    }
    std::array<Var<T>, kLevels> skips;
    Var<T> x = concat_channels(tape, {image, prediction});
    for (std::size_t l = 1; l <= kLevels; ++l) {
      x = down_block(tape, x, l, mode);
      skips[l - 1] = x;
    }
    Var<T> below = max_pool2d(tape, skips[kLevels - 1], 2);
    for (std::size_t l = kLevels; l >= 1; --l) below = up_block(tape, skips[l - 1], below, l, mode);
    return sigmoid(tape, head_(tape, below));
  }

 private:
  Var<T> apply_dropout(Tape<T>& tape, const Var<T>& x, const Mode& mode) const {
    if (!mode.training || cfg_.dropout == 0.0) return x;
    if (!mode.rng) throw std::logic_error("confidence network: training mode requires an rng");
    return dropout(tape, x, cfg_.dropout, true, *mode.rng);
  }

  struct Down {
    ConvBnAct<T> a, b;
  };
  struct Up {
    ConvTranspose2d<T> tconv;
    ConvBnAct<T> a, b;
  };

  ConfConfig cfg_;
  std::array<Down, kLevels> down_;
  std::array<Up, kLevels> up_;
  Conv2d<T> head_;
};

}  // namespace canet::nn
