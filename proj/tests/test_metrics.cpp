#include "ckm/error.hpp"
#include "ckm/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ckm;

namespace {

NdArrayD random_array(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> d(0, 1);
  NdArrayD a(shape);
  for (Index i = 0; i < a.data.size(); ++i) a.data[i] = d(rng);
  return a;
}

// Direct sliding-window SSIM over one H x W plane, 2-D Gaussian weights.
double ssim_oracle_plane(const double* x, const double* y, int h, int w) {
  const int win = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> g(win * win);
  double gs = 0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) gs += g[i * win + j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
  for (auto& v : g) v /= gs;
  double total = 0;
  int count = 0;
  for (int r = 0; r + win <= h; ++r)
    for (int c = 0; c + win <= w; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double k = g[i * win + j], a = x[(r + i) * w + c + j], b = y[(r + i) * w + c + j];
          mx += k * a;
          my += k * b;
          sxx += k * a * a;
          syy += k * b * b;
          sxy += k * a * b;
        }
      sxx -= mx * mx;
      syy -= my * my;
      sxy -= mx * my;
      total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST(Metrics, PointwiseDefinitions) {
  NdArrayD p(Shape{4}), t(Shape{4});
  p.data << 0.0, 0.5, 1.0, 0.25;
  t.data << 0.5, 0.5, 0.0, 0.25;
  EXPECT_DOUBLE_EQ(metrics::mae(p, t), 1.5 / 4);
  EXPECT_DOUBLE_EQ(metrics::mse(p, t), 1.25 / 4);
  EXPECT_DOUBLE_EQ(metrics::rmse(p, t), std::sqrt(1.25 / 4));
  EXPECT_DOUBLE_EQ(metrics::nmse(p, t), 1.25 / (0.25 + 0.25 + 0.0625));
  EXPECT_NEAR(metrics::psnr(p, t), 10 * std::log10(1.0 / (1.25 / 4)), 1e-12);
}

TEST(Metrics, RmseSquaredIsMse) {
  std::mt19937_64 rng(1);
  const auto p = random_array(rng, {3, 20, 20}), t = random_array(rng, {3, 20, 20});
  EXPECT_NEAR(std::pow(metrics::rmse(p, t), 2), metrics::mse(p, t), 1e-15);
}

TEST(Metrics, PsnrIsCappedForPerfectPrediction) {
  std::mt19937_64 rng(2);
  const auto t = random_array(rng, {1, 16, 16});
  EXPECT_EQ(metrics::psnr(t, t), metrics::kPsnrCapDb);
  EXPECT_EQ(metrics::psnr_from_mse(0.0), 100.0);
  EXPECT_NEAR(metrics::psnr_from_mse(1e-4), 40.0, 1e-12);
}

TEST(Metrics, NmseRejectsZeroTruth) {
  NdArrayD z(Shape{2, 2}, 0.0), p(Shape{2, 2}, 0.1);
  EXPECT_THROW(metrics::nmse(p, z), NumericalError);
}

TEST(Metrics, ShapeMismatchThrows) {
  EXPECT_THROW(metrics::mae(NdArrayD(Shape{2}), NdArrayD(Shape{3})), InvalidArgument);
}

TEST(Ssim, IdentityIsOne) {
  std::mt19937_64 rng(3);
  const auto t = random_array(rng, {2, 24, 24});
  EXPECT_NEAR(metrics::ssim(t, t), 1.0, 1e-12);
}

TEST(Ssim, ConstantImagesClosedForm) {
  const NdArrayD a(Shape{1, 16, 16}, 0.0), b(Shape{1, 16, 16}, 1.0);
  const double c1 = 1e-4;
  EXPECT_NEAR(metrics::ssim(a, b), c1 / (1.0 + c1), 1e-12);
}

TEST(Ssim, MatchesSlidingWindowOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    const auto p = random_array(rng, {2, 18, 23}), t = random_array(rng, {2, 18, 23});
    double expected = 0;
    for (int c = 0; c < 2; ++c)
      expected += ssim_oracle_plane(p.data.data() + c * 18 * 23, t.data.data() + c * 18 * 23, 18, 23) / 2;
    EXPECT_NEAR(metrics::ssim(p, t), expected, 1e-9);
  }
}

TEST(Ssim, GaussianWindowIsNormalised) {
  const auto g = metrics::gaussian_window(11, 1.5);
  EXPECT_NEAR(g.sum(), 1.0, 1e-15);
  EXPECT_NEAR(g[5] / g[6], std::exp(1.0 / (2 * 1.5 * 1.5)), 1e-12);
  EXPECT_THROW(metrics::ssim(NdArrayD(Shape{1, 8, 8}), NdArrayD(Shape{1, 8, 8})), InvalidArgument);
}

TEST(MetricAccumulator, PoolsPixelsAndAveragesSsim) {
  std::mt19937_64 rng(5);
  const auto p1 = random_array(rng, {1, 16, 16}), t1 = random_array(rng, {1, 16, 16});
  const auto p2 = random_array(rng, {1, 16, 16}), t2 = random_array(rng, {1, 16, 16});
  metrics::MetricAccumulator acc;
  acc.add(p1, t1);
  acc.add(p2, t2);
  const auto r = acc.report();
  EXPECT_EQ(r.sample_count, 2);
  const double mse = (metrics::mse(p1, t1) + metrics::mse(p2, t2)) / 2;  // equal pixel counts
  EXPECT_NEAR(r.rmse, std::sqrt(mse), 1e-12);
  EXPECT_NEAR(r.mae, (metrics::mae(p1, t1) + metrics::mae(p2, t2)) / 2, 1e-12);
  EXPECT_NEAR(r.nmse,
              ((p1.data - t1.data).square().sum() + (p2.data - t2.data).square().sum()) /
                  (t1.data.square().sum() + t2.data.square().sum()),
              1e-12);
  EXPECT_NEAR(r.psnr_db, metrics::psnr_from_mse(mse), 1e-9);
  EXPECT_NEAR(r.ssim, (metrics::ssim(p1, t1) + metrics::ssim(p2, t2)) / 2, 1e-12);
}

TEST(MetricAccumulator, MaskExcludesPixels) {
  NdArrayD p(Shape{1, 12, 12}, 0.2), t(Shape{1, 12, 12}, 0.2), mask(Shape{1, 12, 12}, 1.0);
  p.data[0] = 1.0;
  mask.data[0] = 0.0;
  metrics::MetricAccumulator acc;
  acc.add(p, t, &mask);
  EXPECT_EQ(acc.report().mae, 0.0);
}

TEST(MetricReport, JsonRoundTrip) {
  metrics::MetricReport r;
  r.mae = 0.1;
  r.rmse = 0.2;
  r.nmse = 0.3;
  r.psnr_db = 14;
  r.ssim = 0.8;
  r.sample_count = 7;
  EXPECT_EQ(metrics::MetricReport::from_json(r.to_json()).to_json(), r.to_json());
}
