#include <cmath>

#include <gtest/gtest.h>

#include "d2am/losses.hpp"
#include "test_util.hpp"

using namespace d2am;
using namespace d2am::testing;

namespace {

double loop_mmd(const Matrix<double>& h, const Matrix<double>& t, const std::vector<double>& bw) {
  auto k = [&](const double* a, const double* b) {
    double sq = 0;
    for (int j = 0; j < h.cols; ++j) sq += (a[j] - b[j]) * (a[j] - b[j]);
    double s = 0;
    for (double w : bw) s += std::exp(-sq / (2 * w));
    return s;
  };
  double hh = 0, tt = 0, ht = 0;
  for (int i = 0; i < h.rows; ++i)
    for (int j = 0; j < h.rows; ++j) {
      hh += k(h.row(i), h.row(j));
      tt += k(t.row(i), t.row(j));
      ht += k(h.row(i), t.row(j));
    }
  const double n2 = static_cast<double>(h.rows) * h.rows;
  return (hh + tt - 2 * ht) / n2;
}

Matrix<double> permute_rows(const Matrix<double>& m, const std::vector<int>& perm) {
  Matrix<double> out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(r, c) = m(perm[static_cast<std::size_t>(r)], c);
  return out;
}

}  // namespace

TEST(Bce, HalfProbabilityGivesLn2) {
  const std::vector<double> p(6, 0.5);
  const std::vector<int> y{0, 1, 1, 0, 1, 0};
  EXPECT_NEAR(bce_loss<double>(p, y), std::log(2.0), 1e-15);
}

TEST(Bce, PerfectPredictionIsNearZero) {
  const std::vector<double> p{0.0, 1.0, 1.0, 0.0};
  const std::vector<int> y{0, 1, 1, 0};
  const double l = bce_loss<double>(p, y);
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-6);
}

TEST(Bce, MatchesLoopOracle) {
  Rng rng(1);
  std::vector<double> p(32);
  std::vector<int> y(32);
  fill_uniform(p, rng, 0.01, 0.99);
  for (auto& v : y) v = static_cast<int>(rng.below(2));
  double expect = 0;
  for (std::size_t i = 0; i < p.size(); ++i) expect -= y[i] ? std::log(p[i]) : std::log(1 - p[i]);
  EXPECT_NEAR(bce_loss<double>(p, y), expect / 32.0, 1e-12);
}

TEST(Bce, DecreasingInProbabilityForLiveLabel) {
  const std::vector<int> y{1};
  double prev = std::numeric_limits<double>::infinity();
  for (double q = 0.05; q < 1.0; q += 0.05) {
    const std::vector<double> p{q};
    const double l = bce_loss<double>(p, y);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Bce, RejectsOutOfRangeAndMismatch) {
  const std::vector<int> y{1};
  EXPECT_THROW(bce_loss<double>(std::vector<double>{1.5}, y), ContractError);
  EXPECT_THROW(bce_loss<double>(std::vector<double>{std::nan("")}, y), ContractError);
  EXPECT_THROW(bce_loss<double>(std::vector<double>{0.5, 0.5}, y), ContractError);
}

TEST(BceGradient, MatchesCentralDifferences) {
  Rng rng(2);
  std::vector<double> p(16), grad(16);
  std::vector<int> y(16);
  fill_uniform(p, rng, 0.05, 0.95);
  for (auto& v : y) v = static_cast<int>(rng.below(2));
  bce_loss<double>(p, y, grad);
  expect_grad_ok(fd_check("p", p, grad, [&] { return bce_loss<double>(p, y); }, 16, rng));
}

TEST(Mmd, IdenticalSamplesGiveZero) {
  Rng rng(3);
  const auto h = random_matrix(8, 4, rng);
  EXPECT_NEAR(mmd_to_prior(h, h, KernelSpec{{0.5, 1, 2}}), 0.0, 1e-10);
  EXPECT_NEAR(mmd_to_prior_median(h, h), 0.0, 1e-10);
}

TEST(Mmd, NonnegativeSymmetricAndPermutationInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_matrix(6, 3, rng);
    const auto t = random_matrix(6, 3, rng, 1.5);
    const KernelSpec k{{rng.uniform(0.2, 3.0)}};
    const double v = mmd_to_prior(h, t, k);
    EXPECT_GE(v, -1e-14);
    EXPECT_NEAR(mmd_to_prior(t, h, k), v, 1e-12);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    EXPECT_NEAR(mmd_to_prior(permute_rows(h, perm), permute_rows(t, perm), k), v, 1e-12);
  }
}

TEST(Mmd, SingletonClosedForm) {
  Matrix<double> x(1, 3), y(1, 3);
  x.data = {0.3, -1.0, 2.0};
  y.data = {1.0, 0.5, 1.0};
  const double sq = 0.49 + 2.25 + 1.0;
  EXPECT_NEAR(mmd_to_prior(x, y, KernelSpec{{1.7}}), 2.0 - 2.0 * std::exp(-sq / (2 * 1.7)), 1e-14);
}

TEST(Mmd, MatchesDoubleLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto h = random_matrix(8, 4, rng);
    const auto t = random_matrix(8, 4, rng);
    const std::vector<double> bw{0.5, 1.3, 2.9};
    EXPECT_NEAR(mmd_to_prior(h, t, KernelSpec{bw}), loop_mmd(h, t, bw), 1e-10);
    const auto med = median_heuristic_kernel(h, t);
    EXPECT_NEAR(mmd_to_prior_median(h, t), loop_mmd(h, t, med.bandwidths), 1e-10);
  }
}

TEST(Mmd, KernelSelfSimilarityEqualsBandwidthCount) {
  const KernelSpec k{{0.5, 1.0, 2.0}};
  EXPECT_DOUBLE_EQ(kernel_value(k, 0.0), 3.0);
  EXPECT_GT(kernel_value(k, 50.0), 0.0);
  EXPECT_LT(kernel_value(k, 1.0), 3.0);
}

TEST(Mmd, MedianHeuristicBandwidths) {
  // Points 0..3 on a line: squared distances {1,1,1,4,4,9}, median 2.5.
  Matrix<double> a(2, 1), b(2, 1);
  a.data = {0.0, 1.0};
  b.data = {2.0, 3.0};
  const auto k = median_heuristic_kernel(a, b);
  ASSERT_EQ(k.bandwidths.size(), 3u);
  EXPECT_DOUBLE_EQ(k.bandwidths[0], 1.25);
  EXPECT_DOUBLE_EQ(k.bandwidths[1], 2.5);
  EXPECT_DOUBLE_EQ(k.bandwidths[2], 5.0);
  // Coincident points fall back to 1.
  EXPECT_DOUBLE_EQ(median_heuristic_kernel(Matrix<double>(2, 2), Matrix<double>(2, 2)).bandwidths[1], 1.0);
}

TEST(Mmd, ShapeMismatchIsContractError) {
  EXPECT_THROW(mmd_to_prior(Matrix<double>(3, 2), Matrix<double>(4, 2), KernelSpec{}), ContractError);
  EXPECT_THROW(mmd_to_prior(Matrix<double>(3, 2), Matrix<double>(3, 1), KernelSpec{}), ContractError);
  EXPECT_THROW(mmd_to_prior(Matrix<double>(1, 1), Matrix<double>(1, 1), KernelSpec{{-1.0}}), ContractError);
}

TEST(MmdGradient, FixedKernelMatchesCentralDifferences) {
  Rng rng(6);
  auto h = random_matrix(8, 5, rng);
  const auto t = random_matrix(8, 5, rng);
  const KernelSpec k{{0.7, 1.4, 2.8}};
  Matrix<double> g;
  mmd_to_prior(h, t, k, &g);
  expect_grad_ok(fd_check("h", h.data, g.data, [&] { return mmd_to_prior(h, t, k); }, 40, rng));
}

TEST(MmdGradient, MedianKernelMatchesCentralDifferences) {
  Rng rng(7);
  auto h = random_matrix(8, 5, rng);
  const auto t = random_matrix(8, 5, rng);
  Matrix<double> g;
  mmd_to_prior_median(h, t, &g);
  expect_grad_ok(fd_check("h", h.data, g.data, [&] { return mmd_to_prior_median(h, t); }, 40, rng, 1e-6));
}

TEST(Depth, ZeroAtTarget) {
  Rng rng(8);
  const auto t = random_matrix(3, 64, rng);
  EXPECT_DOUBLE_EQ(depth_loss(t, t), 0.0);
}

TEST(Depth, UnitOffsetOnEightByEight) {
  Rng rng(9);
  const auto t = random_matrix(4, 64, rng);
  auto p = t;
  for (auto& v : p.data) v += 1.0;
  EXPECT_NEAR(depth_loss(p, t), 64.0, 1e-12);
}

TEST(Depth, MatchesLoopOracle) {
  Rng rng(10);
  const auto p = random_matrix(5, 64, rng);
  const auto t = random_matrix(5, 64, rng);
  double s = 0;
  for (int n = 0; n < 5; ++n)
    for (int k = 0; k < 64; ++k) s += (p(n, k) - t(n, k)) * (p(n, k) - t(n, k));
  EXPECT_NEAR(depth_loss(p, t), s / 5.0, 1e-12);
  EXPECT_THROW(depth_loss(p, random_matrix(5, 63, rng)), ContractError);
}

TEST(DepthGradient, MatchesCentralDifferences) {
  Rng rng(11);
  auto p = random_matrix(3, 64, rng);
  const auto t = random_matrix(3, 64, rng);
  Matrix<double> g;
  depth_loss(p, t, &g);
  expect_grad_ok(fd_check("pred", p.data, g.data, [&] { return depth_loss(p, t); }, 40, rng));
}

TEST(Prior, StandardNormalMoments) {
  Rng rng(12);
  const auto m = draw_prior<double>(200, 50, rng);
  ASSERT_EQ(m.rows, 200);
  ASSERT_EQ(m.cols, 50);
  double mu = 0, var = 0;
  for (double v : m.data) mu += v;
  mu /= static_cast<double>(m.data.size());
  for (double v : m.data) var += (v - mu) * (v - mu);
  var /= static_cast<double>(m.data.size());
  EXPECT_NEAR(mu, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.05);
}
