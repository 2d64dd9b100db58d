#pragma once

// Segmentation quality measures: MAE, mean F-measure (beta^2 = 0.3), mean
// E-measure and S-measure (alpha = 0.5). Thresholds are k / 256 for
// k = 1..255 with pred >= t binarization. All arithmetic is 64-bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "canet/data/image.hpp"

namespace canet::metrics {

inline constexpr int kThresholds = 255;
inline constexpr double kBetaSquared = 0.3;
inline constexpr double kAlpha = 0.5;
inline constexpr double kEps = 1e-8;

namespace detail {

inline void check_pair(const Image& pred, const Image& gt) {
  if (pred.channels != 1 || gt.channels != 1) throw ShapeError("metrics expect single-channel maps");
  require_same_geometry(pred, gt, "metric");
}

// Pixel counts of prediction bins, separately for gt foreground/background.
// Bin b holds pred in [b / 256, (b + 1) / 256), so pred >= k / 256 exactly
// when its bin index is >= k.
struct ThresholdCounts {
  std::array<double, 256> fg_at_or_above{};  // tp(k)
  std::array<double, 256> bg_at_or_above{};  // fp(k)
  double fg = 0, total = 0;
};

inline ThresholdCounts threshold_counts(const Image& pred, const Image& gt) {
  std::array<double, 256> hist_fg{}, hist_bg{};
  ThresholdCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double scaled = std::floor(pred.data[i] * 256.0);
    const int bin = static_cast<int>(std::clamp(scaled, 0.0, 255.0));
    if (gt.data[i] >= 0.5) {
      hist_fg[bin] += 1;
      c.fg += 1;
    } else {
      hist_bg[bin] += 1;
    }
  }
  c.total = static_cast<double>(pred.data.size());
  double tp = 0, fp = 0;
  for (int b = 255; b >= 0; --b) {
    tp += hist_fg[b];
    fp += hist_bg[b];
    c.fg_at_or_above[b] = tp;
    c.bg_at_or_above[b] = fp;
  }
  return c;
}

inline double enhanced_alignment(double g, double b, double mean_g, double mean_b) {
  // kEps only guards a vanishing denominator; added unconditionally it would
  // pull a perfect match below 1 by up to ~1e-6 on small, unbalanced masks.
  const double pg = g - mean_g, pb = b - mean_b;
  const double den = pg * pg + pb * pb;
  const double xi = 2.0 * pg * pb / (den > 0.0 ? den : kEps);
  return (xi + 1.0) * (xi + 1.0) / 4.0;
}

struct RegionStats {
  double mean = 0, var = 0;  // sample variance (n - 1), 0 for a single pixel
  double n = 0;
};

inline RegionStats stats(const std::vector<double>& v) {
  RegionStats s;
  s.n = static_cast<double>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  if (v.size() > 1) {
    for (double x : v) s.var += (x - s.mean) * (x - s.mean);
    s.var /= s.n - 1;
  }
  return s;
}

inline double object_score(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const auto s = stats(values);
  // The denominator is at least 1, so no stabilizer is needed.
  return 2.0 * s.mean / (s.mean * s.mean + 1.0 + 2.0 * std::sqrt(s.var));
}

inline double region_ssim(const Image& pred, const Image& gt, std::size_t y0, std::size_t y1, std::size_t x0,
                          std::size_t x1) {
  const double n = static_cast<double>((y1 - y0) * (x1 - x0));
  double mx = 0, my = 0;
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) {
      mx += pred.at(y, x);
      my += gt.at(y, x);
    }
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cxy = 0;
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) {
      const double dx = pred.at(y, x) - mx, dy = gt.at(y, x) - my;
      vx += dx * dx;
      vy += dy * dy;
      cxy += dx * dy;
    }
  }
  if (n > 1) {
    vx /= n - 1;
    vy /= n - 1;
    cxy /= n - 1;
  } else {
    vx = vy = cxy = 0;
  }
  return (4.0 * mx * my * cxy + kEps) / ((mx * mx + my * my) * (vx + vy) + kEps);
}

// Split index nearest the foreground centroid, kept inside [1, extent - 1].
inline std::size_t split_index(double mean_index, std::size_t extent) {
  const double boundary = std::floor(mean_index + 1.0);  // round(centroid), centroid = mean_index + 0.5
  return static_cast<std::size_t>(std::clamp(boundary, 1.0, static_cast<double>(extent - 1)));
}

}  // namespace detail

inline double mae(const Image& pred, const Image& gt) {
  detail::check_pair(pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - gt.data[i]);
  return s / static_cast<double>(pred.data.size());
}

inline double mean_fbeta(const Image& pred, const Image& gt) {
  detail::check_pair(pred, gt);
  const auto c = detail::threshold_counts(pred, gt);
  double total = 0;
  for (int k = 1; k <= kThresholds; ++k) {
    const double tp = c.fg_at_or_above[k], fp = c.bg_at_or_above[k];
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = c.fg > 0 ? tp / c.fg : 0.0;
    const double den = kBetaSquared * precision + recall;
    total += den > 0 ? (1.0 + kBetaSquared) * precision * recall / den : 0.0;
  }
  return total / kThresholds;
}

inline double mean_emeasure(const Image& pred, const Image& gt) {
  detail::check_pair(pred, gt);
  const auto c = detail::threshold_counts(pred, gt);
  const double n = c.total;
  double total = 0;
  for (int k = 1; k <= kThresholds; ++k) {
    const double tp = c.fg_at_or_above[k], fp = c.bg_at_or_above[k];
    const double positives = tp + fp;
    double score;
    if (c.fg == 0) {
      score = (n - positives) / n;
    } else if (c.fg == n) {
      score = positives / n;
    } else {
      const double mg = c.fg / n, mb = positives / n;
      const double fn = c.fg - tp, tn = n - c.fg - fp;
      score = (tp * detail::enhanced_alignment(1, 1, mg, mb) + fn * detail::enhanced_alignment(1, 0, mg, mb) +
               fp * detail::enhanced_alignment(0, 1, mg, mb) + tn * detail::enhanced_alignment(0, 0, mg, mb)) /
              n;
    }
    total += score;
  }
  return total / kThresholds;
}

inline double smeasure(const Image& pred, const Image& gt) {
  detail::check_pair(pred, gt);
  const std::size_t H = gt.height, W = gt.width;
  const double n = static_cast<double>(gt.data.size());
  double fg = 0, pred_sum = 0, row_sum = 0, col_sum = 0;
  std::vector<double> fg_vals, bg_vals;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double p = pred.at(y, x);
      pred_sum += p;
      if (gt.at(y, x) >= 0.5) {
        fg += 1;
        row_sum += static_cast<double>(y);
        col_sum += static_cast<double>(x);
        fg_vals.push_back(p);
      } else {
        bg_vals.push_back(1.0 - p);
      }
    }
  }
  if (fg == 0) return 1.0 - pred_sum / n;
  if (fg == n) return pred_sum / n;

  const double mu = fg / n;
  const double s_object = mu * detail::object_score(fg_vals) + (1.0 - mu) * detail::object_score(bg_vals);

  double s_region;
  if (H < 2 || W < 2) {
    s_region = detail::region_ssim(pred, gt, 0, H, 0, W);
  } else {
    const std::size_t Y = detail::split_index(row_sum / fg, H);
    const std::size_t X = detail::split_index(col_sum / fg, W);
    const std::array<std::array<std::size_t, 4>, 4> quads{{{0, Y, 0, X}, {0, Y, X, W}, {Y, H, 0, X}, {Y, H, X, W}}};
    s_region = 0;
    for (const auto& q : quads) {
      double q_fg = 0;
      for (std::size_t y = q[0]; y < q[1]; ++y) {
        for (std::size_t x = q[2]; x < q[3]; ++x) q_fg += gt.at(y, x) >= 0.5 ? 1.0 : 0.0;
      }
      s_region += q_fg * detail::region_ssim(pred, gt, q[0], q[1], q[2], q[3]);
    }
    s_region /= fg;
  }
  return std::clamp(kAlpha * s_object + (1.0 - kAlpha) * s_region, 0.0, 1.0);
}

/// dilate(gt, r) XOR erode(gt, r) with a (2r + 1)^2 square; out-of-image
/// pixels are ignored by both operators.
inline Image boundary_band(const Image& gt, int radius) {
  if (radius < 1) throw std::invalid_argument("boundary_band: radius must be >= 1");
  if (gt.channels != 1) throw ShapeError("boundary_band expects a single-channel mask");
  const long H = static_cast<long>(gt.height), W = static_cast<long>(gt.width);
  Image band(gt.height, gt.width, 1);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      bool any = false, all = true;
      for (long dy = -radius; dy <= radius; ++dy) {
        for (long dx = -radius; dx <= radius; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
          const bool on = gt.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) >= 0.5;
          any = any || on;
          all = all && on;
        }
      }
      band.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = (any != all) ? 1.0 : 0.0;
    }
  }
  return band;
}

}  // namespace canet::metrics
