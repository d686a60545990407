#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rd/common.hpp"
#include "rd/oracles.hpp"
#include "rd/sources.hpp"

using namespace rd;
using oracle::ba_solve;
using oracle::BaResult;
using src::Metric;
using src::Source;

namespace {

const std::vector<std::vector<double>> kBinary{{0.0}, {1.0}};

}  // namespace

// ---------------------------------------------------------------------------
// ba_solve
// ---------------------------------------------------------------------------

// Bernoulli(1/2) under Hamming at the slope associated with D = 0.1:
// lambda = ln((1-D)/D). The analytic oracle is R = H(p) - H(D).
TEST(BaSolve, BinarySourceMatchesAnalyticRate) {
  double target_d = 0.1;
  double lambda = std::log((1.0 - target_d) / target_d);
  BaResult res = ba_solve({0.5, 0.5}, kBinary, kBinary, Metric::Hamming,
                          lambda, 1e-12);
  EXPECT_TRUE(res.point.converged);
  EXPECT_NEAR(res.point.distortion, 0.1, 1e-6);
  double expected = oracle::binary_rd(0.5, res.point.distortion);
  EXPECT_NEAR(expected, 0.36806, 1e-4);  // ln 2 - H_b(0.1)
  EXPECT_NEAR(res.point.rate_nats, expected, 1e-6);
  res.channel.validate();
}

TEST(BaSolve, ZeroLambdaGivesZeroRate) {
  BaResult res =
      ba_solve({0.3, 0.7}, kBinary, kBinary, Metric::Hamming, 0.0, 1e-12);
  EXPECT_TRUE(res.point.converged);
  EXPECT_NEAR(res.point.rate_nats, 0.0, 1e-12);
}

TEST(BaSolve, LargeLambdaApproachesLosslessLimit) {
  BaResult res =
      ba_solve({0.5, 0.5}, kBinary, kBinary, Metric::Hamming, 50.0, 1e-13);
  EXPECT_NEAR(res.point.rate_nats, std::log(2.0), 1e-6);
  EXPECT_NEAR(res.point.distortion, 0.0, 1e-6);
}

TEST(BaSolve, SkewedBinaryMatchesAnalyticRate) {
  for (double lambda : {1.5, 2.0, 2.5, 3.0, 4.0}) {
    BaResult res =
        ba_solve({0.8, 0.2}, kBinary, kBinary, Metric::Hamming, lambda, 1e-13);
    EXPECT_TRUE(res.point.converged);
    double expected = oracle::binary_rd(0.2, res.point.distortion);
    EXPECT_NEAR(res.point.rate_nats, expected, 1e-4) << "lambda=" << lambda;
  }
}

// Rate non-increasing in D along a lambda sweep, and the points trace a
// convex non-increasing curve.
TEST(BaSolve, SweepTracesConvexNonIncreasingCurve) {
  std::vector<std::vector<double>> support;
  std::vector<double> pmf;
  for (int i = 0; i < 9; ++i) {
    support.push_back({static_cast<double>(i) / 2.0});
    pmf.push_back((i + 1.0));
  }
  double tot = 0;
  for (double p : pmf) tot += p;
  for (double& p : pmf) p /= tot;
  {  // renormalize exactly
    double s = 0;
    for (double p : pmf) s += p;
    pmf.back() += 1.0 - s;
  }

  std::vector<oracle::RDPoint> pts;
  for (double lambda : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) {
    BaResult res = ba_solve(pmf, support, support, Metric::SquaredError,
                            lambda, 1e-12);
    EXPECT_TRUE(res.point.converged);
    pts.push_back(res.point);
  }
  std::sort(pts.begin(), pts.end(),
            [](const oracle::RDPoint& a, const oracle::RDPoint& b) {
              return a.distortion < b.distortion;
            });
  for (std::size_t i = 1; i < pts.size(); ++i)
    EXPECT_LE(pts[i].rate_nats, pts[i - 1].rate_nats + 1e-9);
  // Slopes of consecutive chords must be non-decreasing for convexity.
  for (std::size_t i = 2; i < pts.size(); ++i) {
    double s1 = (pts[i - 1].rate_nats - pts[i - 2].rate_nats) /
                (pts[i - 1].distortion - pts[i - 2].distortion);
    double s2 = (pts[i].rate_nats - pts[i - 1].rate_nats) /
                (pts[i].distortion - pts[i - 1].distortion);
    EXPECT_GE(s2 - s1, -1e-9);
  }
}

TEST(BaSolve, NonConvergenceIsFlaggedNotThrown) {
  // One sweep can never satisfy the decrease test, so the best point comes
  // back flagged rather than thrown.
  BaResult res =
      ba_solve({0.8, 0.2}, kBinary, kBinary, Metric::Hamming, 2.0, 1e-12, 1);
  EXPECT_FALSE(res.point.converged);
  EXPECT_GE(res.point.rate_nats, 0.0);
}

TEST(BaSolve, TargetDistortionSweep) {
  BaResult res = oracle::ba_solve_at_distortion({0.5, 0.5}, kBinary, kBinary,
                                                Metric::Hamming, 0.1);
  EXPECT_NEAR(res.point.distortion, 0.1, 1e-5);
  EXPECT_NEAR(res.point.rate_nats, 0.36806, 1e-4);
}

// ---------------------------------------------------------------------------
// reverse_waterfill
// ---------------------------------------------------------------------------

TEST(ReverseWaterfill, BudgetEqualToVarianceGivesZero) {
  EXPECT_DOUBLE_EQ(oracle::reverse_waterfill({1.0}, 1.0), 0.0);
}

TEST(ReverseWaterfill, SingleComponentClosedForm) {
  EXPECT_NEAR(oracle::reverse_waterfill({1.0}, 0.25), 0.5 * std::log(4.0),
              1e-10);
  EXPECT_NEAR(oracle::reverse_waterfill({1.0}, 0.25), 0.69315, 1e-5);
}

TEST(ReverseWaterfill, TwoComponentHandWaterFill) {
  // Water level 0.5: rate = 0.5 ln(2/0.5) + 0.5 ln(0.5/0.5) = 0.5 ln 4.
  EXPECT_NEAR(oracle::reverse_waterfill({2.0, 0.5}, 1.0), 0.5 * std::log(4.0),
              1e-9);
}

TEST(ReverseWaterfill, ErrorsAndEdgeCases) {
  EXPECT_THROW(oracle::reverse_waterfill({1.0}, 0.0), UsageError);
  EXPECT_THROW(oracle::reverse_waterfill({1.0}, -0.5), UsageError);
  EXPECT_DOUBLE_EQ(oracle::reverse_waterfill({1.0, 2.0}, 5.0), 0.0);
}

// Convex and non-increasing in D over a grid of 100 budgets.
TEST(ReverseWaterfill, ConvexNonIncreasingInD) {
  std::vector<double> vars{2.0, 1.0, 0.5, 0.25};
  double total = 3.75;
  std::vector<double> rates;
  std::vector<double> ds;
  for (int i = 1; i <= 100; ++i) {
    double d = total * i / 101.0;
    ds.push_back(d);
    rates.push_back(oracle::reverse_waterfill(vars, d));
  }
  for (std::size_t i = 1; i < rates.size(); ++i)
    EXPECT_LE(rates[i], rates[i - 1] + 1e-12);
  for (std::size_t i = 2; i < rates.size(); ++i) {
    double s1 = (rates[i - 1] - rates[i - 2]) / (ds[i - 1] - ds[i - 2]);
    double s2 = (rates[i] - rates[i - 1]) / (ds[i] - ds[i - 1]);
    EXPECT_GE(s2 - s1, -1e-9);
  }
}

// ---------------------------------------------------------------------------
// gaussian_intercept
// ---------------------------------------------------------------------------

TEST(GaussianIntercept, PinnedIdentityValues) {
  EXPECT_DOUBLE_EQ(oracle::gaussian_intercept(1, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(oracle::gaussian_intercept(20, 10.0), 10.0);
}

// n=1, lambda=5: tangency at D = 1/(2 lambda) = 0.1, F = 0.5 ln 10 + 0.5.
// Cross-checked by a grid minimum of R(D) + lambda D over the water-filled
// curve.
TEST(GaussianIntercept, OneDimensionalTangency) {
  double f = oracle::gaussian_intercept(1, 5.0);
  EXPECT_NEAR(f, 0.5 * std::log(10.0) + 0.5, 1e-12);
  EXPECT_NEAR(f, 1.65129, 1e-5);

  double best = 1e300;
  for (int i = 1; i <= 200000; ++i) {
    double d = 1.2 * i / 200000.0;
    best = std::min(best, oracle::reverse_waterfill({1.0}, d) + 5.0 * d);
  }
  EXPECT_NEAR(f, best, 1e-6);
}

// Per-dimension decomposition: F_n(n t) / n equals F_1(t) for every n.
TEST(GaussianIntercept, PerDimensionDecomposition) {
  for (double t : {0.1, 0.5, 2.0, 7.5}) {
    double f1 = oracle::gaussian_intercept(1, t);
    for (std::size_t n : {2ul, 5ul, 20ul, 100ul}) {
      double fn = oracle::gaussian_intercept(n, static_cast<double>(n) * t);
      EXPECT_NEAR(fn / static_cast<double>(n), f1, 1e-12) << "n=" << n;
    }
  }
}

// ---------------------------------------------------------------------------
// discretize
// ---------------------------------------------------------------------------

TEST(Discretize, GaussianHistogramMatchesCdfDifferences) {
  Source g = Source::standard_gaussian(1, 2024);
  oracle::GridSpec grid;
  grid.lo = {-4.0};
  grid.hi = {4.0};
  grid.bins = {101};
  grid.samples = 10000000;
  Source tab = oracle::discretize(g, grid);

  auto cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
  double covered = cdf(4.0) - cdf(-4.0);
  const auto& support = tab.support();
  const auto& pmf = tab.pmf();
  double w = 8.0 / 101.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    double c = support[i][0];
    double expected = (cdf(c + w / 2) - cdf(c - w / 2)) / covered;
    EXPECT_NEAR(pmf[i], expected, 1e-3);
  }
}

TEST(Discretize, PointMassLandsInOneCell) {
  Source pm = Source::discrete_tabular({{0.3}}, {1.0}, 5);
  oracle::GridSpec grid;
  grid.lo = {-1.0};
  grid.hi = {1.0};
  grid.bins = {5};
  grid.samples = 10000;
  Source tab = oracle::discretize(pm, grid);
  ASSERT_EQ(tab.pmf().size(), 1u);
  EXPECT_DOUBLE_EQ(tab.pmf()[0], 1.0);
  EXPECT_NEAR(tab.support()[0][0], 0.4, 1e-12);  // center of the bin holding 0.3
}

TEST(Discretize, BananaPmfSumsToOne) {
  Source banana = Source::banana2d(0.5, 2.0, 7);
  oracle::GridSpec grid;
  grid.lo = {-8.0, -8.0};
  grid.hi = {8.0, 8.0};
  grid.bins = {64, 64};
  grid.samples = 200000;
  Source tab = oracle::discretize(banana, grid);
  double s = 0.0;
  for (double p : tab.pmf()) s += p;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Discretize, OversizedGridIsAnError) {
  Source banana = Source::banana2d(0.5, 2.0, 7);
  oracle::GridSpec grid;
  grid.lo = {-8.0, -8.0};
  grid.hi = {8.0, 8.0};
  grid.bins = {2000, 2000};
  EXPECT_THROW(oracle::discretize(banana, grid), UsageError);
}

// BA on a discretized 1-D Gaussian against reverse water-filling at
// mid-distortion; the discretization caveat only bites near D -> 0.
TEST(Discretize, BaAgreesWithWaterfillAtMidDistortion) {
  Source g = Source::standard_gaussian(1, 31);
  oracle::GridSpec grid;
  grid.lo = {-4.0};
  grid.hi = {4.0};
  grid.bins = {101};
  grid.samples = 1000000;
  Source tab = oracle::discretize(g, grid);
  for (double lambda : {0.7, 1.0, 2.0}) {  // D roughly in [0.25, 0.71]
    BaResult res = ba_solve(tab.pmf(), tab.support(), tab.support(),
                            Metric::SquaredError, lambda, 1e-9);
    ASSERT_TRUE(res.point.converged);
    double d = res.point.distortion;
    ASSERT_GT(d, 0.2);
    ASSERT_LT(d, 0.8);
    double exact = oracle::reverse_waterfill({1.0}, d);
    EXPECT_NEAR(res.point.rate_nats, exact, 0.02) << "lambda=" << lambda;
  }
}
