#pragma once

#include <vector>

#include "canet/data/dataset.hpp"
#include "canet/train/trainer.hpp"

namespace testutil {

/// Narrow networks at 32x32 so trainer tests run in seconds.
inline canet::TrainConfig tiny_config(canet::TrainMode mode = canet::TrainMode::ours, std::uint64_t seed = 0) {
  canet::TrainConfig c;
  c.image_size = 32;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = seed;
  c.cod_widths = {4, 6, 8, 8, 8};
  c.fusion_width = 6;
  c.conf_widths = {2, 4, 4, 4, 4};
  c.set_mode(mode);
  return c;
}

inline std::vector<canet::LabeledImage> tiny_data(std::size_t n, std::uint64_t base_seed = 500,
                                                  std::size_t size = 32, double difficulty = 0.5) {
  std::vector<canet::LabeledImage> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = canet::synth::synth_sample(base_seed + i, size, difficulty);
    out.push_back({canet::sample_id(i), std::move(s.image), std::move(s.mask)});
  }
  return out;
}

}  // namespace testutil
