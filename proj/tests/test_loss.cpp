#include "ckm/ad/gradcheck.hpp"
#include "ckm/loss.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ckm;
using T = ad::Tensor<double>;

namespace {

using Plane = std::vector<std::vector<double>>;

Plane plane_of(const T& t, Index n, Index c) {
  const Index h = t.dim(2), w = t.dim(3);
  Plane p(h, std::vector<double>(w));
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) p[i][j] = t.value()[((n * t.dim(1) + c) * h + i) * w + j];
  return p;
}

Plane pool(const Plane& p) {
  Plane o(p.size() / 2, std::vector<double>(p[0].size() / 2));
  for (std::size_t i = 0; i < o.size(); ++i)
    for (std::size_t j = 0; j < o[0].size(); ++j)
      o[i][j] = (p[2 * i][2 * j] + p[2 * i][2 * j + 1] + p[2 * i + 1][2 * j] + p[2 * i + 1][2 * j + 1]) / 4;
  return o;
}

double sample(const Plane& p, double y, double x) {
  const int h = int(p.size()), w = int(p[0].size());
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double a = y - y0, b = x - x0;
  return (1 - a) * ((1 - b) * p[y0][x0] + b * p[y0][x1]) + a * ((1 - b) * p[y1][x0] + b * p[y1][x1]);
}

Plane upsample(const Plane& p) {
  Plane o(p.size() * 2, std::vector<double>(p[0].size() * 2));
  for (std::size_t i = 0; i < o.size(); ++i)
    for (std::size_t j = 0; j < o[0].size(); ++j) o[i][j] = sample(p, (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5);
  return o;
}

double mean_abs_diff(const Plane& a, const Plane& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) s += std::abs(a[i][j] - b[i][j]);
  return s / double(a.size() * a[0].size());
}

Plane diff(const Plane& a, const Plane& b) {
  Plane o = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) o[i][j] -= b[i][j];
  return o;
}

// Per-plane pyramid residuals, mirrored independently of the library.
std::vector<Plane> pyramid(Plane p, int levels) {
  std::vector<Plane> out;
  for (int l = 0; l + 1 < levels; ++l) {
    Plane d = pool(p);
    out.push_back(diff(p, upsample(d)));
    p = d;
  }
  out.push_back(p);
  return out;
}

Plane sobel(const Plane& p, double eps) {
  const int h = int(p.size()), w = int(p[0].size());
  auto at = [&](int i, int j) { return p[std::clamp(i, 0, h - 1)][std::clamp(j, 0, w - 1)]; };
  Plane o(h, std::vector<double>(w));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double gx = (at(i - 1, j + 1) + 2 * at(i, j + 1) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i, j - 1) + at(i + 1, j - 1));
      const double gy = (at(i + 1, j - 1) + 2 * at(i + 1, j) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i - 1, j) + at(i - 1, j + 1));
      o[i][j] = std::sqrt(gx * gx + gy * gy + eps);
    }
  return o;
}

struct OracleTerms {
  double l2 = 0, lap = 0, edge = 0;
};

OracleTerms oracle(const T& p, const T& t, const loss::CompositeLossConfig& cfg) {
  OracleTerms r;
  const Index planes = p.dim(0) * p.dim(1);
  r.l2 = (p.value() - t.value()).square().mean();
  std::vector<double> level_sum(cfg.pyramid_levels, 0.0);
  for (Index n = 0; n < p.dim(0); ++n)
    for (Index c = 0; c < p.dim(1); ++c) {
      const auto pp = pyramid(plane_of(p, n, c), cfg.pyramid_levels);
      const auto pt = pyramid(plane_of(t, n, c), cfg.pyramid_levels);
      for (int l = 0; l < cfg.pyramid_levels; ++l) level_sum[l] += mean_abs_diff(pp[l], pt[l]);
      r.edge += mean_abs_diff(sobel(plane_of(p, n, c), cfg.edge_eps), sobel(plane_of(t, n, c), cfg.edge_eps));
    }
  for (int l = 0; l < cfg.pyramid_levels; ++l) r.lap += cfg.level_weights[l] * level_sum[l] / double(planes);
  r.edge /= double(planes);
  return r;
}

}  // namespace

TEST(Loss, IdenticalInputsGiveZero) {
  std::mt19937_64 rng(1);
  const T x = ad::random_tensor(rng, {2, 3, 16, 16}, 0, 1);
  const auto terms = loss::total_loss(x, x);
  EXPECT_EQ(terms.total.item(), 0.0);
  EXPECT_EQ(terms.l2.item(), 0.0);
  EXPECT_EQ(terms.lap.item(), 0.0);
  EXPECT_EQ(terms.edge.item(), 0.0);
}

TEST(Loss, TotalIsWeightedSumOfTerms) {
  std::mt19937_64 rng(2);
  const T p = ad::random_tensor(rng, {2, 2, 16, 16}, 0, 1);
  const T t = ad::random_tensor(rng, {2, 2, 16, 16}, 0, 1);
  const loss::CompositeLossConfig cfg;
  EXPECT_EQ(cfg.lambda1, 1.0);
  EXPECT_EQ(cfg.lambda2, 0.02);
  EXPECT_EQ(cfg.lambda3, 0.01);
  const auto terms = loss::total_loss(p, t, cfg);
  EXPECT_NEAR(terms.total.item(),
              terms.l2.item() + 0.02 * terms.lap.item() + 0.01 * terms.edge.item(), 1e-12);
}

TEST(Loss, TermsMatchIndependentOracle) {
  std::mt19937_64 rng(3);
  const loss::CompositeLossConfig cfg;
  for (int trial = 0; trial < 5; ++trial) {
    const T p = ad::random_tensor(rng, {2, 2, 16, 24}, 0, 1);
    const T t = ad::random_tensor(rng, {2, 2, 16, 24}, 0, 1);
    const auto terms = loss::total_loss(p, t, cfg);
    const auto o = oracle(p, t, cfg);
    EXPECT_NEAR(terms.l2.item(), o.l2, 1e-12);
    EXPECT_NEAR(terms.lap.item(), o.lap, 1e-12);
    EXPECT_NEAR(terms.edge.item(), o.edge, 1e-12);
  }
}

TEST(Loss, PyramidReconstructsInput) {
  std::mt19937_64 rng(4);
  const T x = ad::random_tensor(rng, {1, 2, 32, 32});
  const auto levels = loss::laplacian_pyramid(x, 4);
  ASSERT_EQ(levels.size(), 4u);
  EXPECT_EQ(levels[3].shape(), (Shape{1, 2, 4, 4}));
  EXPECT_LT((loss::reconstruct_pyramid(levels).value() - x.value()).abs().maxCoeff(), 1e-6);
}

TEST(Loss, DeltaEnergyConcentratesInFinestBand) {
  T x = T::zeros({1, 1, 16, 16});
  ad::Buffer<double> v = x.value();
  v[8 * 16 + 8] = 1.0;
  const auto levels = loss::laplacian_pyramid(T::from_buffer({1, 1, 16, 16}, v), 4);
  const double e0 = levels[0].value().square().sum();
  for (std::size_t l = 1; l < levels.size(); ++l) EXPECT_GT(e0, levels[l].value().square().sum());
}

TEST(Loss, ConstantImagesDifferOnlyInBaseBand) {
  const T a = T::constant({1, 1, 16, 16}, 0.3);
  const T b = T::constant({1, 1, 16, 16}, 0.7);
  EXPECT_NEAR(loss::lap_loss(a, b).item(), 0.125 * 0.4, 1e-14);
  EXPECT_NEAR(loss::edge_loss(a, b).item(), 0.0, 1e-15);
  EXPECT_NEAR(loss::l2_loss(a, b).item(), 0.16, 1e-14);
}

TEST(Loss, SobelEdgeMapExamples) {
  const T flat = T::constant({1, 1, 8, 8}, 0.5);
  EXPECT_TRUE((loss::sobel_edge_map(flat).value() - 1e-3).abs().maxCoeff() < 1e-15);

  ad::Buffer<double> v = ad::Buffer<double>::Zero(64);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 4; j < 8; ++j) v[i * 8 + j] = 1.0;
  const T e = loss::sobel_edge_map(T::from_buffer({1, 1, 8, 8}, v));
  EXPECT_NEAR(e.value()[3 * 8 + 3], std::sqrt(16 + 1e-6), 1e-12);
  EXPECT_NEAR(e.value()[3 * 8 + 4], std::sqrt(16 + 1e-6), 1e-12);
  EXPECT_NEAR(e.value()[3 * 8 + 1], 1e-3, 1e-15);
}

TEST(Loss, ShapeMismatchAndBadConfigThrow) {
  EXPECT_THROW(loss::total_loss(T::zeros({1, 1, 8, 8}), T::zeros({1, 2, 8, 8})), InvalidArgument);
  EXPECT_THROW(loss::lap_loss(T::zeros({1, 1, 12, 12}), T::zeros({1, 1, 12, 12})), InvalidArgument);
  loss::CompositeLossConfig bad;
  bad.lambda2 = -1;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  EXPECT_THROW(loss::CompositeLossConfig::from_json({{"pyramid_levels", 3}, {"level_weights", {1, 2}}}),
               InvalidArgument);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const T t = ad::random_tensor(rng, {1, 2, 16, 16}, 0, 1);
  auto f = [&](const std::vector<T>& in) { return loss::total_loss(in[0], t).total; };
  const auto r = ad::gradcheck(f, {ad::random_tensor(rng, {1, 2, 16, 16}, 0, 1)});
  EXPECT_TRUE(r.passed(1e-4)) << r.max_relative_error;
}
