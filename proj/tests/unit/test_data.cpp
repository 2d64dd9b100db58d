#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>

#include <gtest/gtest.h>

#include "canet/data/dataset.hpp"
#include "canet/data/image_io.hpp"
#include "canet/data/synth.hpp"
#include "oracles/metric_oracle.hpp"
#include "support/test_util.hpp"

using namespace canet;

namespace {

int count_components(const Image& m) {
  const std::size_t H = m.height, W = m.width;
  std::vector<int> seen(H * W, 0);
  int comps = 0;
  for (std::size_t s = 0; s < H * W; ++s) {
    if (m.data[s] < 0.5 || seen[s]) continue;
    ++comps;
    std::deque<std::size_t> q{s};
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop_front();
      const std::size_t y = i / W, x = i % W;
      std::vector<std::size_t> nb;
      if (y > 0) nb.push_back(i - W);
      if (y + 1 < H) nb.push_back(i + W);
      if (x > 0) nb.push_back(i - 1);
      if (x + 1 < W) nb.push_back(i + 1);
      for (std::size_t j : nb) {
        if (m.data[j] >= 0.5 && !seen[j]) {
          seen[j] = 1;
          q.push_back(j);
        }
      }
    }
  }
  return comps;
}

std::string slurp(const std::filesystem::path& p) { return read_file(p); }

// Best F-measure any global luminance threshold (either polarity) can reach,
// selected with the ground truth in hand: an upper bound for the baseline.
double best_luminance_f(const synth::CamoSample& s) {
  oracle::Map lum{s.mask.height, s.mask.width, std::vector<double>(s.mask.pixels())};
  for (std::size_t i = 0; i < s.mask.pixels(); ++i) {
    lum.v[i] = (s.image.data[3 * i] + s.image.data[3 * i + 1] + s.image.data[3 * i + 2]) / 3.0;
  }
  oracle::Map inv = lum;
  for (auto& v : inv.v) v = 1.0 - v;
  const oracle::Map gt{s.mask.height, s.mask.width, s.mask.data};
  double best = 0;
  for (int k = 0; k <= 256; ++k) {
    const double t = k / 256.0;
    best = std::max({best, oracle::fbeta_at(lum, gt, t), oracle::fbeta_at(inv, gt, t)});
  }
  return best;
}

}  // namespace

TEST(ValueNoise, DeterministicAndInUnitRange) {
  const auto a = synth::value_noise(11, 32, 4, 8);
  EXPECT_EQ(a, synth::value_noise(11, 32, 4, 8));
  EXPECT_NE(a, synth::value_noise(12, 32, 4, 8));
  const auto [lo, hi] = std::minmax_element(a.data.begin(), a.data.end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
  EXPECT_THROW(synth::value_noise(1, 8, 0, 4), std::invalid_argument);
}

TEST(ValueNoise, UnitPeriodIsPlainLatticeNoise) {
  // With one octave and a lattice point per pixel, no interpolation happens:
  // neighbouring pixels are uncorrelated.
  const auto n = synth::value_noise(3, 64, 1, 1);
  double sxy = 0, sx = 0, sxx = 0;
  std::size_t cnt = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x + 1 < 64; ++x) {
      sxy += n.at(y, x) * n.at(y, x + 1);
      sx += n.at(y, x);
      sxx += n.at(y, x) * n.at(y, x);
      ++cnt;
    }
  const double mean = sx / cnt, var = sxx / cnt - mean * mean;
  EXPECT_LT(std::abs((sxy / cnt - mean * mean) / var), 0.1);
}

TEST(BlobMask, ZeroHarmonicsGiveDisc) {
  synth::Blob b;
  b.cx = 16;
  b.cy = 15;
  b.r0 = 7;
  const auto m = synth::rasterize(b, 32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const double d = std::hypot(x + 0.5 - 16, y + 0.5 - 15);
      if (std::abs(d - 7) > 1e-9) EXPECT_EQ(m.at(y, x), d < 7 ? 1.0 : 0.0) << y << "," << x;
    }
}

TEST(BlobMask, FractionBoundsSingleComponentDeterminism) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto m = synth::blob_mask(seed, 64);
    const double f = synth::foreground_fraction(m);
    ASSERT_GE(f, synth::kMinForeground) << seed;
    ASSERT_LE(f, synth::kMaxForeground) << seed;
    ASSERT_EQ(count_components(m), 1) << seed;
    ASSERT_EQ(m, synth::blob_mask(seed, 64));
  }
}

TEST(BlobMask, ImpossibleSizeAbortsWithDiagnostic) {
  try {
    synth::blob_mask(1, 1);
    FAIL() << "expected rejection failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("100 attempts"), std::string::npos);
  }
}

TEST(SynthSample, InvariantsAndDeterminism) {
  for (double d : {0.0, 0.5, 1.0}) {
    const auto s = synth::synth_sample(42, 64, d);
    EXPECT_EQ(s.image.channels, 3u);
    for (double v : s.image.data) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    const auto t = synth::synth_sample(42, 64, d);
    EXPECT_EQ(s.image, t.image);
    EXPECT_EQ(s.mask, t.mask);
  }
  EXPECT_THROW(synth::synth_sample(1, 64, 1.5), std::invalid_argument);
  EXPECT_THROW(synth::synth_sample(1, 64, -0.1), std::invalid_argument);
}

TEST(SynthSample, FullDifficultyMatchesChannelMeans) {
  // Per image, the low-frequency background can sit a few hundredths higher
  // or lower under the blob; pooled over seeds there is no object cue left.
  double diff[3] = {0, 0, 0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synth::synth_sample(seed, 64, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      double in = 0, out = 0, nin = 0, nout = 0;
      for (std::size_t i = 0; i < s.mask.pixels(); ++i) {
        const double v = s.image.data[3 * i + c];
        if (s.mask.data[i] > 0.5) {
          in += v;
          ++nin;
        } else {
          out += v;
          ++nout;
        }
      }
      diff[c] += (in / nin - out / nout) / 100.0;
    }
  }
  for (double d : diff) EXPECT_LT(std::abs(d), 0.02);
}

TEST(SynthSample, ZeroDifficultyObjectIsBrighter) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synth::synth_sample(seed, 64, 0.0);
    double in = 0, out = 0, nin = 0, nout = 0;
    for (std::size_t i = 0; i < s.mask.pixels(); ++i) {
      const double l = s.image.data[3 * i] + s.image.data[3 * i + 1] + s.image.data[3 * i + 2];
      (s.mask.data[i] > 0.5 ? in : out) += l;
      (s.mask.data[i] > 0.5 ? nin : nout) += 1;
    }
    EXPECT_GT(in / nin - out / nout, 0.3) << seed;
  }
}

TEST(SynthSample, LuminanceThresholdBaseline) {
  double hard = 0, easy = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    hard += best_luminance_f(synth::synth_sample(1000 + seed, 64, 0.9));
    easy += best_luminance_f(synth::synth_sample(1000 + seed, 64, 0.0));
  }
  EXPECT_LT(hard / 50, 0.5);
  EXPECT_GT(easy / 50, 0.8);
}

TEST(Pnm, WhitePixelBytes) {
  Image im(1, 1, 1, 1.0);
  EXPECT_EQ(encode_pgm(im), std::string("P5\n1 1\n255\n") + '\xff');
  Image rgb(1, 2, 3, 0.0);
  rgb.at(0, 1, 2) = 1.0;
  EXPECT_EQ(encode_ppm(rgb), std::string("P6\n2 1\n255\n") + std::string(5, '\0') + '\xff');
}

TEST(Pnm, QuantizedRoundTripIsExact) {
  Rng rng(5);
  Image im(7, 5, 3);
  for (auto& v : im.data) v = static_cast<double>(rng.below(256)) / 255.0;
  EXPECT_EQ(decode_ppm(encode_ppm(im)), im);
  Image g(3, 9, 1);
  for (auto& v : g.data) v = rng.uniform();
  const auto once = decode_pgm(encode_pgm(g));
  EXPECT_EQ(encode_pgm(once), encode_pgm(g));
  for (std::size_t i = 0; i < g.data.size(); ++i) EXPECT_LE(std::abs(once.data[i] - g.data[i]), 0.5 / 255 + 1e-12);
}

TEST(Pnm, ParseErrors) {
  const std::string good = encode_pgm(Image(2, 2, 1, 0.5));
  try {
    decode_pgm(good.substr(0, good.size() - 1));
    FAIL();
  } catch (const PnmParseError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 4 bytes, got 3"), std::string::npos);
  }
  EXPECT_THROW(decode_pgm("P6\n1 1\n255\n\x01"), PnmParseError);
  EXPECT_THROW(decode_pgm("P5\nx 1\n255\n\x01"), PnmParseError);
  EXPECT_THROW(decode_pgm("P5\n0 1\n255\n"), PnmParseError);
  EXPECT_THROW(decode_pgm("P5\n1 1\n65535\n\x01\x01"), PnmParseError);
  EXPECT_THROW(encode_pgm(Image(1, 1, 3)), std::invalid_argument);
}

TEST(Pnm, MissingFileNamesPath) {
  try {
    read_pgm("/nonexistent/canet/x.pgm");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/canet/x.pgm"), std::string::npos);
  }
}

TEST(Dataset, EmptyCountWritesOnlyManifest) {
  testutil::TempDir dir;
  const auto m = generate_dataset(dir.path(), 0, 64, 1, 0.5);
  EXPECT_TRUE(m.ids.empty());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_TRUE(load_dataset(dir.path()).empty());
}

TEST(Dataset, LayoutManifestAndByteIdenticalRegeneration) {
  testutil::TempDir a, b;
  generate_dataset(a.path(), 3, 32, 77, 0.8);
  generate_dataset(b.path(), 3, 32, 77, 0.8);
  for (const char* f : {"img_00000.ppm", "gt_00002.pgm", "manifest.json"}) {
    ASSERT_TRUE(std::filesystem::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto j = nlohmann::json::parse(slurp(a / "manifest.json"));
  for (const char* k : {"version", "count", "size", "base_seed", "difficulty", "ids"}) EXPECT_TRUE(j.contains(k)) << k;
  const auto m = load_manifest(a.path());
  EXPECT_EQ(m.ids, (std::vector<std::string>{"00000", "00001", "00002"}));
  EXPECT_TRUE(std::is_sorted(m.ids.begin(), m.ids.end()));
  const auto data = load_dataset(a.path());
  ASSERT_EQ(data.size(), 3u);
  const auto s = synth::synth_sample(78, 32, 0.8);
  EXPECT_EQ(data[1].mask, s.mask);
  EXPECT_EQ(encode_ppm(data[1].image), encode_ppm(s.image));
}

TEST(Dataset, MissingPiecesNamed) {
  testutil::TempDir dir;
  try {
    load_manifest(dir.path());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.json"), std::string::npos);
  }
  generate_dataset(dir.path(), 2, 32, 0, 0.5);
  std::filesystem::remove(dir / "gt_00001.pgm");
  try {
    load_manifest(dir.path());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("gt_00001.pgm"), std::string::npos);
  }
}

TEST(Dataset, TwoHundredSamplesWithinBudget) {
  testutil::TempDir dir;
  const auto t0 = std::chrono::steady_clock::now();
  generate_dataset(dir.path(), 200, 64, 0, 0.8);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(s, 30.0);
}
