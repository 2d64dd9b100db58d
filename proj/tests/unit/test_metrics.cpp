#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "canet/data/image_io.hpp"
#include "canet/metrics/metrics.hpp"
#include "canet/metrics/report.hpp"
#include "oracles/metric_oracle.hpp"
#include "support/test_util.hpp"

using namespace canet;
using namespace canet::metrics;

namespace {

Image make(std::size_t h, std::size_t w, std::vector<double> v) {
  Image im(h, w, 1);
  im.data = std::move(v);
  return im;
}

oracle::Map to_map(const Image& im) { return {im.height, im.width, im.data}; }

Image mask_from_bits(unsigned bits, std::size_t h, std::size_t w) {
  Image m(h, w, 1);
  for (std::size_t i = 0; i < h * w; ++i) m.data[i] = (bits >> i) & 1u ? 1.0 : 0.0;
  return m;
}

// Random map mixing continuous values with exact grid thresholds, so the
// >= boundary is exercised.
Image random_pred(Rng& rng, std::size_t h, std::size_t w) {
  Image p(h, w, 1);
  for (auto& v : p.data) v = rng.bernoulli(0.3) ? static_cast<double>(rng.below(257)) / 256.0 : rng.uniform();
  return p;
}

void expect_matches_oracle(const Image& p, const Image& g, double tol) {
  const auto P = to_map(p), G = to_map(g);
  EXPECT_NEAR(mae(p, g), oracle::mae(P, G), tol);
  EXPECT_NEAR(mean_fbeta(p, g), oracle::mean_fbeta(P, G), tol);
  EXPECT_NEAR(mean_emeasure(p, g), oracle::mean_emeasure(P, G), tol);
  EXPECT_NEAR(smeasure(p, g), oracle::smeasure(P, G), tol);
}

}  // namespace

TEST(Mae, HandExample) {
  EXPECT_NEAR(mae(make(2, 2, {0.2, 0.8, 0.0, 1.0}), make(2, 2, {0, 1, 0, 1})), 0.1, 1e-15);
  EXPECT_EQ(mae(make(1, 2, {0.5, 0.5}), make(1, 2, {0, 1})), 0.5);
  EXPECT_THROW(mae(make(1, 2, {0, 0}), make(2, 1, {0, 0})), ShapeError);
}

TEST(MeanF, HalfMaskClosedForm) {
  Image gt(4, 4, 1), pred(4, 4, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      gt.at(y, x) = x < 2 ? 1.0 : 0.0;
      pred.at(y, x) = x < 2 ? 0.9 : 0.4;
    }
  // k <= 102: everything positive (P = 0.5, R = 1); 103..230: exact; above: nothing predicted.
  const double low = 1.3 * 0.5 / (0.3 * 0.5 + 1.0);
  EXPECT_NEAR(low, 0.5652, 1e-4);
  const double want = (102 * low + 128 * 1.0) / 255.0;
  EXPECT_NEAR(mean_fbeta(pred, gt), want, 1e-12);
  EXPECT_NEAR(oracle::mean_fbeta(to_map(pred), to_map(gt)), want, 1e-12);
}

TEST(MeanF, ZeroPredictionScoresZero) {
  EXPECT_EQ(mean_fbeta(make(2, 2, {0, 0, 0, 0}), make(2, 2, {1, 0, 0, 1})), 0.0);
}

TEST(MeanE, DegenerateRules) {
  EXPECT_EQ(mean_emeasure(make(2, 2, {0, 0, 0, 0}), make(2, 2, {0, 0, 0, 0})), 1.0);
  EXPECT_EQ(mean_emeasure(make(2, 2, {1, 1, 1, 1}), make(2, 2, {1, 1, 1, 1})), 1.0);
  EXPECT_EQ(mean_emeasure(make(2, 2, {1, 1, 1, 1}), make(2, 2, {0, 0, 0, 0})), 0.0);
}

TEST(MeanE, OneWrongPixelMatchesOracle) {
  Image gt(4, 4, 1);
  for (std::size_t y = 1; y < 3; ++y)
    for (std::size_t x = 1; x < 3; ++x) gt.at(y, x) = 1;
  Image pred = gt;
  pred.at(0, 0) = 1;
  EXPECT_NEAR(mean_emeasure(pred, gt), oracle::mean_emeasure(to_map(pred), to_map(gt)), 1e-9);
  EXPECT_LT(mean_emeasure(pred, gt), 1.0);
}

TEST(SMeasure, DegenerateRules) {
  EXPECT_EQ(smeasure(make(2, 2, {0, 0, 0, 0}), make(2, 2, {0, 0, 0, 0})), 1.0);
  EXPECT_DOUBLE_EQ(smeasure(make(2, 2, {0.2, 0.2, 0.2, 0.2}), make(2, 2, {0, 0, 0, 0})), 0.8);
  EXPECT_DOUBLE_EQ(smeasure(make(2, 2, {0.7, 0.7, 0.7, 0.7}), make(2, 2, {1, 1, 1, 1})), 0.7);
}

TEST(SMeasure, ShiftedSquareMatchesOracle) {
  Image gt(8, 8, 1), pred(8, 8, 1);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) {
      gt.at(y, x) = 1;
      pred.at(y, x + 1) = 1;
    }
  const double s = smeasure(pred, gt);
  EXPECT_NEAR(s, oracle::smeasure(to_map(pred), to_map(gt)), 1e-9);
  EXPECT_GT(s, 0.3);
  EXPECT_LT(s, 1.0);
}

TEST(PerfectPrediction, ScoresAtTheTop) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    Image gt(4 + rng.below(8), 4 + rng.below(8), 1);
    for (auto& v : gt.data) v = rng.bernoulli(0.4);
    const double fg = std::accumulate(gt.data.begin(), gt.data.end(), 0.0);
    if (fg == 0 || fg == static_cast<double>(gt.pixels())) continue;
    EXPECT_EQ(mae(gt, gt), 0.0);
    EXPECT_EQ(mean_fbeta(gt, gt), 1.0);
    EXPECT_EQ(mean_emeasure(gt, gt), 1.0);
    EXPECT_EQ(smeasure(gt, gt), 1.0);
  }
}

TEST(OracleEquivalence, AllFourByFourMasksOneRandomPredEach) {
  Rng rng(2);
  for (unsigned bits = 0; bits < (1u << 16); ++bits) {
    const Image gt = mask_from_bits(bits, 4, 4);
    const Image pred = random_pred(rng, 4, 4);
    const auto P = to_map(pred), G = to_map(gt);
    ASSERT_NEAR(mae(pred, gt), oracle::mae(P, G), 1e-9) << bits;
    ASSERT_NEAR(mean_fbeta(pred, gt), oracle::mean_fbeta(P, G), 1e-9) << bits;
    ASSERT_NEAR(mean_emeasure(pred, gt), oracle::mean_emeasure(P, G), 1e-9) << bits;
    ASSERT_NEAR(smeasure(pred, gt), oracle::smeasure(P, G), 1e-9) << bits;
  }
}

TEST(OracleEquivalence, RectangularMaps) {
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const std::size_t h = 2 + rng.below(9), w = 2 + rng.below(9);
    Image gt(h, w, 1);
    for (auto& v : gt.data) v = rng.bernoulli(0.3);
    expect_matches_oracle(random_pred(rng, h, w), gt, 1e-9);
  }
}

TEST(Properties, AllScoresInUnitInterval) {
  Rng rng(4);
  for (int k = 0; k < 300; ++k) {
    Image gt(6, 6, 1);
    for (auto& v : gt.data) v = rng.bernoulli(rng.uniform());
    const auto s = score("x", random_pred(rng, 6, 6), gt);
    for (double v : {s.mae, s.mean_f, s.mean_e, s.s_measure}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Properties, ThresholdMetricsInvariantUnderGridPreservingSquare) {
  // Values placed so that v and v^2 fall on the same side of every grid
  // threshold: pick v from {0.001, 0.999} plus bin-interior points whose
  // squares stay in the same bin is rare, so use the extremes only.
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    Image gt(5, 5, 1), p(5, 5, 1);
    for (auto& v : gt.data) v = rng.bernoulli(0.5);
    for (auto& v : p.data) v = rng.bernoulli(0.5) ? 0.001 : 0.9995;
    Image sq = p;
    for (auto& v : sq.data) v = v * v;
    EXPECT_DOUBLE_EQ(mean_fbeta(p, gt), mean_fbeta(sq, gt));
    EXPECT_DOUBLE_EQ(mean_emeasure(p, gt), mean_emeasure(sq, gt));
  }
}

TEST(Properties, EMeasureComplementSymmetry) {
  Rng rng(6);
  for (int k = 0; k < 100; ++k) {
    Image gt(5, 5, 1), p(5, 5, 1);
    for (auto& v : gt.data) v = rng.bernoulli(0.5);
    const double fg = std::accumulate(gt.data.begin(), gt.data.end(), 0.0);
    if (fg == 0 || fg == 25) continue;
    // Binary predictions keep the >= threshold rule symmetric under complement.
    for (auto& v : p.data) v = rng.bernoulli(0.5);
    Image pc = p, gc = gt;
    for (auto& v : pc.data) v = 1 - v;
    for (auto& v : gc.data) v = 1 - v;
    EXPECT_NEAR(mean_emeasure(p, gt), mean_emeasure(pc, gc), 1e-12);
  }
}

TEST(BoundaryBand, EmptyForEmptyMask) {
  const auto b = boundary_band(Image(6, 6, 1), 2);
  for (double v : b.data) EXPECT_EQ(v, 0.0);
}

TEST(BoundaryBand, SquareRingRadiusOne) {
  Image gt(8, 8, 1);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) gt.at(y, x) = 1;
  const auto b = boundary_band(gt, 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const bool outer_ring = y >= 1 && y <= 6 && x >= 1 && x <= 6;
      const bool inner_core = y >= 3 && y <= 4 && x >= 3 && x <= 4;
      EXPECT_EQ(b.at(y, x), outer_ring && !inner_core ? 1.0 : 0.0) << y << "," << x;
    }
  EXPECT_THROW(boundary_band(gt, 0), std::invalid_argument);
}

TEST(BoundaryBand, AreaGrowsWithRadius) {
  Rng rng(7);
  Image gt(16, 16, 1);
  for (std::size_t y = 4; y < 12; ++y)
    for (std::size_t x = 3; x < 10; ++x) gt.at(y, x) = 1;
  double prev = 0;
  for (int r = 1; r <= 4; ++r) {
    const auto b = boundary_band(gt, r);
    const double area = std::accumulate(b.data.begin(), b.data.end(), 0.0);
    EXPECT_GT(area, prev);
    prev = area;
  }
}

TEST(Report, AggregateIsMeanAndRowsSorted) {
  std::vector<ScoredPair> pairs{{"b", make(2, 2, {0.1, 0.9, 0.3, 0.2}), make(2, 2, {0, 1, 0, 0})},
                                {"a", make(2, 2, {0, 1, 1, 0}), make(2, 2, {0, 1, 1, 0})}};
  const auto r = evaluate(pairs);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].id, "a");
  EXPECT_NEAR(r.aggregate.mae, (r.rows[0].mae + r.rows[1].mae) / 2, 1e-12);
  EXPECT_NEAR(r.aggregate.s_measure, (r.rows[0].s_measure + r.rows[1].s_measure) / 2, 1e-12);
  EXPECT_THROW(evaluate({}), EvaluationError);
}

TEST(Report, CsvSchema) {
  const auto r = evaluate({{"00001", make(1, 2, {0, 1}), make(1, 2, {0, 1})}});
  const auto csv = to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,mae,mean_f,mean_e,s_measure");
  EXPECT_NE(csv.find("\n00001,0.000000,1.000000,"), std::string::npos);
  EXPECT_NE(csv.find("\nAGGREGATE,0.000000,1.000000,"), std::string::npos);
}

TEST(Report, DatasetPairingAndOrphans) {
  testutil::TempDir pred, gt;
  const auto g = make(2, 2, {0, 1, 1, 0});
  write_pgm(gt / "gt_00000.pgm", g);
  write_pgm(gt / "gt_00001.pgm", g);
  write_pgm(pred / "pred_00000.pgm", g);
  try {
    evaluate_dataset(pred.path(), gt.path());
    FAIL() << "expected an orphan error";
  } catch (const EvaluationError& e) {
    EXPECT_NE(std::string(e.what()).find("00001"), std::string::npos);
  }
  write_pgm(pred / "pred_00001.pgm", g);
  const auto r = evaluate_dataset(pred.path(), gt.path());
  EXPECT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.aggregate.mae, 0.0);
  EXPECT_EQ(r.aggregate.mean_f, 1.0);
}

TEST(Report, EmptyDirectoriesRejected) {
  testutil::TempDir pred, gt;
  EXPECT_THROW(evaluate_dataset(pred.path(), gt.path()), EvaluationError);
}
