#pragma once

// Procedural camouflage scenes: a star-shaped object textured to blend into a
// value-noise background, with the blend strength set by `difficulty`.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "canet/core/rng.hpp"
#include "canet/data/image.hpp"

namespace canet::synth {

/// Sum of bilinearly interpolated random lattices, `base_period` pixels apart
/// at the coarsest octave, halving period and amplitude per octave, then
/// min-max renormalized into [0, 1].
inline Image value_noise(std::uint64_t seed, std::size_t size, int octaves, std::size_t base_period) {
  if (octaves < 1) throw std::invalid_argument("value_noise: octaves must be >= 1");
  if (size == 0 || base_period == 0) throw std::invalid_argument("value_noise: size and period must be positive");
  Rng rng(seed);
  Image out(size, size, 1);
  double amplitude = 1.0;
  for (int o = 0; o < octaves; ++o) {
    const std::size_t period = std::max<std::size_t>(1, base_period >> o);
    const std::size_t cells = (size + period - 1) / period + 1;
    std::vector<double> lattice(cells * cells);
    for (auto& v : lattice) v = rng.uniform();
    for (std::size_t y = 0; y < size; ++y) {
      const double gy = static_cast<double>(y) / static_cast<double>(period);
      const std::size_t y0 = static_cast<std::size_t>(gy);
      const double fy = gy - static_cast<double>(y0);
      for (std::size_t x = 0; x < size; ++x) {
        const double gx = static_cast<double>(x) / static_cast<double>(period);
        const std::size_t x0 = static_cast<std::size_t>(gx);
        const double fx = gx - static_cast<double>(x0);
        const double top = (1 - fx) * lattice[y0 * cells + x0] + fx * lattice[y0 * cells + x0 + 1];
        const double bot = (1 - fx) * lattice[(y0 + 1) * cells + x0] + fx * lattice[(y0 + 1) * cells + x0 + 1];
        out.at(y, x) += amplitude * ((1 - fy) * top + fy * bot);
      }
    }
    amplitude *= 0.5;
  }
  const auto [mn, mx] = std::minmax_element(out.data.begin(), out.data.end());
  const double lo = *mn, span = *mx - *mn;
  for (auto& v : out.data) v = span > 0 ? (v - lo) / span : 0.0;
  return out;
}

inline constexpr int kHarmonics = 6;

/// Star-convex region r(phi) = r0 * (1 + sum_h a_h cos(h phi + rho_h)).
struct Blob {
  double cx = 0, cy = 0, r0 = 0;
  std::array<double, kHarmonics> amp{};
  std::array<double, kHarmonics> phase{};

  double radius(double phi) const {
    double s = 1.0;
    for (int h = 0; h < kHarmonics; ++h) s += amp[h] * std::cos((h + 1) * phi + phase[h]);
    return r0 * s;
  }

  /// Signed distance proxy along the ray through (x, y): r(phi) - |p - c|.
  double inset(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return radius(std::atan2(dy, dx)) - std::hypot(dx, dy);
  }
};

inline Blob sample_blob(Rng& rng, std::size_t size) {
  const double s = static_cast<double>(size);
  Blob b;
  b.cx = rng.uniform(0.25 * s, 0.75 * s);
  b.cy = rng.uniform(0.25 * s, 0.75 * s);
  b.r0 = rng.uniform(0.13 * s, 0.33 * s);
  for (int h = 0; h < kHarmonics; ++h) {
    const double bound = 0.25 / (h + 1);
    b.amp[h] = rng.uniform(-bound, bound);
    b.phase[h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return b;
}

/// Pixels whose centers fall inside the blob, restricted to the 4-connected
/// component that contains the blob center.
inline Image rasterize(const Blob& b, std::size_t size) {
  Image inside(size, size, 1);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (b.inset(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) > 0) inside.at(y, x) = 1.0;
    }
  }
  Image mask(size, size, 1);
  const auto clampi = [&](double v) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(size - 1)));
  };
  const std::size_t sx = clampi(b.cx), sy = clampi(b.cy);
  if (inside.at(sy, sx) == 0.0) return mask;
  std::deque<std::pair<std::size_t, std::size_t>> queue{{sy, sx}};
  mask.at(sy, sx) = 1.0;
  while (!queue.empty()) {
    const auto [y, x] = queue.front();
    queue.pop_front();
    const std::pair<long, long> nbrs[] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    for (const auto& [dy, dx] : nbrs) {
      const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
      if (ny < 0 || nx < 0 || ny >= static_cast<long>(size) || nx >= static_cast<long>(size)) continue;
      const auto uy = static_cast<std::size_t>(ny), ux = static_cast<std::size_t>(nx);
      if (inside.at(uy, ux) == 1.0 && mask.at(uy, ux) == 0.0) {
        mask.at(uy, ux) = 1.0;
        queue.emplace_back(uy, ux);
      }
    }
  }
  return mask;
}

inline double foreground_fraction(const Image& mask) {
  double s = 0;
  for (double v : mask.data) s += v;
  return s / static_cast<double>(mask.data.size());
}

inline constexpr double kMinForeground = 0.05;
inline constexpr double kMaxForeground = 0.6;
inline constexpr int kMaxBlobAttempts = 100;

struct BlobSample {
  Blob blob;
  Image mask;
};

inline BlobSample sample_blob_mask(Rng& rng, std::size_t size) {
  for (int attempt = 0; attempt < kMaxBlobAttempts; ++attempt) {
    Blob b = sample_blob(rng, size);
    Image m = rasterize(b, size);
    const double f = foreground_fraction(m);
    if (f >= kMinForeground && f <= kMaxForeground) return {b, std::move(m)};
  }
  throw std::runtime_error("blob_mask: no mask with foreground fraction in [0.05, 0.6] after " +
                           std::to_string(kMaxBlobAttempts) + " attempts at size " + std::to_string(size));
}

inline Image blob_mask(std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  return sample_blob_mask(rng, size).mask;
}

struct CamoSample {
  Image image;  // RGB, [0, 1]
  Image mask;   // binary
  std::uint64_t seed = 0;
  double difficulty = 0;
};

inline constexpr int kNoiseOctaves = 4;
inline constexpr double kTextureContrast = 0.3;
inline constexpr double kLuminanceOffset = 0.15;
inline constexpr double kRimDarkening = 0.05;

/// Background and object share a base colour. The object's own texture is
/// finer-grained; `difficulty` blends it toward the background texture and
/// fades its luminance offset, leaving only the anti-aliased rim at 1.
inline CamoSample synth_sample(std::uint64_t seed, std::size_t size, double difficulty) {
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw std::invalid_argument("difficulty must lie in [0, 1]");
  Rng rng(seed);
  const std::uint64_t blob_seed = rng.next();
  const std::uint64_t bg_seed = rng.next();
  const std::uint64_t fg_seed = rng.next();
  std::array<double, 3> base{};
  for (auto& b : base) b = rng.uniform(0.3, 0.7);

  Rng blob_rng(blob_seed);
  BlobSample bs = sample_blob_mask(blob_rng, size);

  CamoSample s;
  s.seed = seed;
  s.difficulty = difficulty;
  s.mask = bs.mask;
  s.image = Image(size, size, 3);
  const std::size_t bg_period = std::max<std::size_t>(1, size / 4);
  const std::size_t fg_period = std::max<std::size_t>(1, size / 8);
  for (std::size_t c = 0; c < 3; ++c) {
    const Image bg = value_noise(bg_seed + c, size, kNoiseOctaves, bg_period);
    const Image fg = value_noise(fg_seed + c, size, kNoiseOctaves, fg_period);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double inset = bs.blob.inset(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        const double alpha = std::clamp(inset + 0.5, 0.0, 1.0);
        const double rim = std::max(0.0, 1.0 - std::abs(inset));
        const double back = base[c] + kTextureContrast * (bg.at(y, x) - 0.5);
        const double own = base[c] + kTextureContrast * (fg.at(y, x) - 0.5);
        const double inner = (1 - difficulty) * own + difficulty * back + (1 - difficulty) * kLuminanceOffset;
        const double v = alpha * inner + (1 - alpha) * back - kRimDarkening * rim;
        s.image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return s;
}

}  // namespace canet::synth
