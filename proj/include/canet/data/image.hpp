#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "canet/core/tensor.hpp"

namespace canet {

/// Interleaved (HWC) image with values nominally in [0, 1]. One channel for
/// masks and prediction maps, three for RGB.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t pixels() const noexcept { return height * width; }
  double& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }

  bool same_geometry(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool operator==(const Image&) const = default;
};

inline void require_same_geometry(const Image& a, const Image& b, const char* what) {
  if (!a.same_geometry(b)) {
    throw ShapeError(std::string(what) + ": image geometry mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " + std::to_string(b.height) +
                     "x" + std::to_string(b.width) + "x" + std::to_string(b.channels));
  }
}

/// Copies images into an N x C x H x W tensor.
template <typename T>
Tensor<T> to_tensor(const std::vector<const Image*>& batch) {
  if (batch.empty()) throw std::invalid_argument("to_tensor: empty batch");
  const Image& f = *batch.front();
  Tensor<T> t({batch.size(), f.channels, f.height, f.width});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Image& im = *batch[n];
    if (!im.same_geometry(f)) throw ShapeError("to_tensor: images in a batch must share geometry");
    for (std::size_t c = 0; c < f.channels; ++c) {
      for (std::size_t y = 0; y < f.height; ++y) {
        for (std::size_t x = 0; x < f.width; ++x) t.at(n, c, y, x) = static_cast<T>(im.at(y, x, c));
      }
    }
  }
  return t;
}

/// Extracts sample n of an N x C x H x W tensor as an image.
template <typename T>
Image from_tensor(const Tensor<T>& t, std::size_t n) {
  require_rank4(t.shape(), "from_tensor");
  Image im(t.dim(2), t.dim(3), t.dim(1));
  for (std::size_t c = 0; c < im.channels; ++c) {
    for (std::size_t y = 0; y < im.height; ++y) {
      for (std::size_t x = 0; x < im.width; ++x) im.at(y, x, c) = static_cast<double>(t.at(n, c, y, x));
    }
  }
  return im;
}

}  // namespace canet
