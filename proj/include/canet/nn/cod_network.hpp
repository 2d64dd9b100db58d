#pragma once

// Camouflaged object detection network: a five-stage convolutional encoder,
// progressive fusion modules, holistic attention on F3, and two sigmoid heads.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "canet/nn/layers.hpp"

namespace canet::nn {

struct CodConfig {
  std::size_t image_size = 64;
  std::array<std::size_t, 5> widths{16, 32, 64, 64, 64};
  std::size_t fusion_width = 32;
  std::size_t rcab_reduction = 4;
  bool refine = true;  // false reproduces the M1 ablation (no attention refinement)
  std::size_t blur_kernel = 5;
  double blur_sigma = 1.5;
};

template <typename T>
struct EncoderFeatures {
  std::array<Var<T>, 5> f;  // strides 1, 2, 4, 8, 16
};

template <typename T>
struct CodOutputs {
  Var<T> y_ini;          // N x 1 x H x W, in (0, 1)
  Var<T> y_ref;          // N x 1 x H x W, in (0, 1); the same node as y_ini when refinement is off
  Var<T> y_ini_coarse;   // initial prediction at F3 resolution, the attention source
};

/// Normalized 2-D Gaussian as a 1 x 1 x k x k filter.
template <typename T>
Tensor<T> gaussian_kernel(std::size_t k, double sigma) {
  Tensor<T> w({1, 1, k, k});
  const double c = (static_cast<double>(k) - 1.0) / 2.0;
  double total = 0.0;
  std::vector<double> vals(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      vals[i * k + j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      total += vals[i * k + j];
    }
  }
  for (std::size_t i = 0; i < k * k; ++i) w[i] = static_cast<T>(vals[i] / total);
  return w;
}

/// F6 = F3 * max(blur(y), y), the attention map broadcast over channels.
template <typename T>
Var<T> holistic_attention(Tape<T>& tape, const Var<T>& f3, const Var<T>& y_coarse, const Var<T>& blur_kernel) {
  const auto& fs = f3->value.shape();
  const auto& ys = y_coarse->value.shape();
  require_rank4(fs, "holistic_attention feature");
  require_rank4(ys, "holistic_attention map");
  if (ys[0] != fs[0] || ys[1] != 1 || ys[2] != fs[2] || ys[3] != fs[3]) {
    throw ShapeError("holistic_attention: map " + to_string(ys) + " does not match feature " + to_string(fs));
  }
  const std::size_t pad = blur_kernel->value.dim(2) / 2;
  auto blurred = conv2d(tape, y_coarse, blur_kernel, Var<T>{}, 1, pad);
  auto attention = maximum(tape, blurred, y_coarse);
  return scale_spatial(tape, f3, attention);
}

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore<T>& store, const std::string& name, const std::array<std::size_t, 5>& widths, Rng& rng) {
    std::size_t in = 3;
    for (std::size_t s = 0; s < 5; ++s) {
      const std::string stage = name + ".stage" + std::to_string(s + 1);
      first_[s] = ConvBnAct<T>(store, stage + ".a", in, widths[s], s == 0 ? 1 : 2, rng);
      second_[s] = ConvBnAct<T>(store, stage + ".b", widths[s], widths[s], 1, rng);
      in = widths[s];
    }
  }

  EncoderFeatures<T> operator()(Tape<T>& tape, const Var<T>& image, const Mode& mode) const {
    EncoderFeatures<T> out;
    Var<T> x = image;
    for (std::size_t s = 0; s < 5; ++s) {
      x = second_[s](tape, first_[s](tape, x, mode), mode);
      out.f[s] = x;
    }
    return out;
  }

 private:
  std::array<ConvBnAct<T>, 5> first_, second_;
};

/// Progressive high-to-low fusion with the top feature injected at every level.
template <typename T>
class FusionModule {
 public:
  FusionModule() = default;

  /// `level_channels` is ordered low -> high level.
  FusionModule(ParamStore<T>& store, const std::string& name, const std::vector<std::size_t>& level_channels,
               std::size_t top_channels, std::size_t width, std::size_t reduction, Rng& rng) {
    if (level_channels.size() < 2) throw std::invalid_argument("fusion module needs at least two levels");
    std::size_t acc_channels = level_channels.back();
    for (std::size_t i = level_channels.size() - 1; i-- > 0;) {
      const std::string s = name + ".level" + std::to_string(i);
      Step step;
      step.acc_proj = Conv2d<T>(store, s + ".acc_proj", acc_channels, width, 1, 1, 0, true, rng);
      step.top_proj = Conv2d<T>(store, s + ".top_proj", top_channels, width, 1, 1, 0, true, rng);
      step.level_proj = Conv2d<T>(store, s + ".level_proj", level_channels[i], width, 1, 1, 0, true, rng);
      step.fuse = ConvBnAct<T>(store, s + ".fuse", 3 * width, width, 1, rng);
      step.rcab = Rcab<T>(store, s + ".rcab", width, reduction, rng);
      steps_.push_back(std::move(step));
      acc_channels = width;
    }
    head_ = Conv2d<T>(store, name + ".head", width, 1, 1, 1, 0, true, rng);
    head_.weight()->value.fill(T(0));
  }

  /// Returns a one-channel logit map at the resolution of features.front().
  Var<T> operator()(Tape<T>& tape, const std::vector<Var<T>>& features, const Var<T>& top, const Mode& mode) const {
    if (features.empty()) throw std::invalid_argument("fusion module: empty feature list");
    if (features.size() != steps_.size() + 1) {
      throw std::invalid_argument("fusion module: expected " + std::to_string(steps_.size() + 1) +
                                  " feature levels, got " + std::to_string(features.size()));
    }
    Var<T> acc = features.back();
    for (std::size_t k = 0; k < steps_.size(); ++k) {
      const auto& level = features[features.size() - 2 - k];
      const std::size_t h = level->value.dim(2), w = level->value.dim(3);
      const auto& st = steps_[k];
      auto a = st.acc_proj(tape, bilinear_resize(tape, acc, h, w));
      auto t = st.top_proj(tape, bilinear_resize(tape, top, h, w));
      auto l = st.level_proj(tape, level);
      acc = st.rcab(tape, st.fuse(tape, concat_channels(tape, {a, t, l}), mode));
    }
    return head_(tape, acc);
  }

  const Conv2d<T>& head() const { return head_; }

 private:
  struct Step {
    Conv2d<T> acc_proj, top_proj, level_proj;
    ConvBnAct<T> fuse;
    Rcab<T> rcab;
  };
  std::vector<Step> steps_;
  Conv2d<T> head_;
};

template <typename T>
class CodNetwork {
 public:
  CodNetwork() = default;
  CodNetwork(ParamStore<T>& store, const CodConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.image_size == 0 || cfg.image_size % 16 != 0) {
      throw std::invalid_argument("COD network: image size " + std::to_string(cfg.image_size) +
                                  " must be a positive multiple of 16");
    }
    const auto& w = cfg.widths;
    encoder_ = Encoder<T>(store, "cod.encoder", w, rng);
    initial_ = FusionModule<T>(store, "cod.fm_ini", {w[2], w[3], w[4]}, w[4], cfg.fusion_width,
                               cfg.rcab_reduction, rng);
    if (cfg.refine) {
      res7_ = ResBlock<T>(store, "cod.res7", w[2], rng);
      res8_ = ResBlock<T>(store, "cod.res8", w[2], rng);
      refined_ = FusionModule<T>(store, "cod.fm_ref", {w[1], w[2], w[2], w[2]}, w[2], cfg.fusion_width,
                                 cfg.rcab_reduction, rng);
    }
    blur_ = constant(gaussian_kernel<T>(cfg.blur_kernel, cfg.blur_sigma));
  }

  const CodConfig& config() const noexcept { return cfg_; }

  EncoderFeatures<T> encode(Tape<T>& tape, const Var<T>& image, const Mode& mode) const {
    check_image(image);
    return encoder_(tape, image, mode);
  }

  CodOutputs<T> operator()(Tape<T>& tape, const Var<T>& image, const Mode& mode) const {
    check_image(image);
    const std::size_t H = image->value.dim(2), W = image->value.dim(3);
    auto feats = encoder_(tape, image, mode);
    const auto& F = feats.f;
    auto ini_logits = initial_(tape, {F[2], F[3], F[4]}, F[4], mode);
    CodOutputs<T> out;
    out.y_ini_coarse = sigmoid(tape, ini_logits);
    out.y_ini = sigmoid(tape, bilinear_resize(tape, ini_logits, H, W));
    if (!cfg_.refine) {
      out.y_ref = out.y_ini;
      return out;
    }
    auto f6 = holistic_attention(tape, F[2], out.y_ini_coarse, blur_);
    auto f7 = res7_(tape, f6, mode);
    auto f8 = res8_(tape, f7, mode);
    auto ref_logits = refined_(tape, {F[1], f6, f7, f8}, f8, mode);
    out.y_ref = sigmoid(tape, bilinear_resize(tape, ref_logits, H, W));
    return out;
  }

 private:
  void check_image(const Var<T>& image) const {
    const auto& s = image->value.shape();
    require_rank4(s, "COD network input");
    if (s[1] != 3 || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
      throw ShapeError("COD network: expected N x 3 x " + std::to_string(cfg_.image_size) + " x " +
                       std::to_string(cfg_.image_size) + " input, got " + to_string(s));
    }
  }

  CodConfig cfg_;
  Encoder<T> encoder_;
  FusionModule<T> initial_, refined_;
  ResBlock<T> res7_, res8_;
  Var<T> blur_;
};

}  // namespace canet::nn
