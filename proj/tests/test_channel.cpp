#include "ckm/channel.hpp"
#include "ckm/error.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace ckm;

namespace {

// |sum_n conj(h_n) w_n|^2 with h built ray by ray.
double brute_force_gain(const std::vector<PropagationRay>& rays, const ComplexVector& w) {
  const int n_ant = static_cast<int>(w.size());
  std::vector<Complex> h(n_ant, Complex(0, 0));
  for (const auto& r : rays) {
    for (int n = 0; n < n_ant; ++n) {
      const double arg = r.phase + std::numbers::pi * n * std::sin(r.departure_angle);
      h[n] += r.amplitude * Complex(std::cos(arg), std::sin(arg));
    }
  }
  Complex acc(0, 0);
  for (int n = 0; n < n_ant; ++n) acc += std::conj(h[n]) * w[n];
  return std::norm(acc);
}

}  // namespace

TEST(SteeringVector, MatchesTermByTermExponential) {
  const ComplexVector a = steering_vector(0.3, 8);
  ASSERT_EQ(a.size(), 8);
  for (int n = 0; n < 8; ++n) {
    const double arg = std::numbers::pi * n * std::sin(0.3);
    EXPECT_NEAR(a[n].real(), std::cos(arg), 1e-15);
    EXPECT_NEAR(a[n].imag(), std::sin(arg), 1e-15);
  }
}

TEST(SteeringVector, BroadsideIsAllOnes) {
  const ComplexVector a = steering_vector(0.0, 5);
  for (int n = 0; n < 5; ++n) EXPECT_EQ(a[n], Complex(1.0, 0.0));
}

TEST(SteeringVector, RejectsBadArguments) {
  EXPECT_THROW(steering_vector(0.1, 0), InvalidArgument);
  EXPECT_THROW(steering_vector(std::nan(""), 4), InvalidArgument);
  EXPECT_THROW(steering_vector(INFINITY, 4), InvalidArgument);
}

TEST(DftCodebook, UnitaryForPowersOfTwo) {
  for (int n : {1, 2, 4, 8, 16}) {
    const DftCodebook cb = build_dft_codebook(n);
    ASSERT_EQ(cb.size(), n);
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        Complex dot(0, 0);
        for (int k = 0; k < n; ++k) dot += std::conj(cb.columns(k, i)) * cb.columns(k, j);
        worst = std::max(worst, std::abs(dot - Complex(i == j ? 1.0 : 0.0, 0.0)));
      }
    }
    EXPECT_LT(worst, 1e-12) << "N=" << n;
  }
}

TEST(DftCodebook, BeamGridSines) {
  const DftCodebook cb = build_dft_codebook(4);
  const double expected[] = {-0.75, -0.25, 0.25, 0.75};
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(std::sin(cb.beam_angles[j]), expected[j], 1e-15);
    EXPECT_NEAR(beam_grid_sine(j, 4), expected[j], 1e-15);
  }
}

TEST(DftCodebook, RejectsNonPositiveSize) {
  EXPECT_THROW(build_dft_codebook(0), InvalidArgument);
}

TEST(EquivalentGain, MatchedOnGridLosRayGivesNAlphaSquared) {
  for (int n : {1, 2, 4, 8, 16}) {
    const DftCodebook cb = build_dft_codebook(n);
    for (int j = 0; j < n; ++j) {
      MultipathChannel ch;
      ch.num_antennas = n;
      const double alpha = 0.37;
      ch.rays.push_back({RayKind::LoS, 10.0, cb.beam_angles[j], alpha, 1.234});
      EXPECT_NEAR(equivalent_gain(ch, cb.codeword(j)), n * alpha * alpha, 1e-9);
    }
  }
}

TEST(EquivalentGain, TwoRayChannelMatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  const DftCodebook cb = build_dft_codebook(4);
  for (int trial = 0; trial < 10; ++trial) {
    MultipathChannel ch;
    ch.num_antennas = 4;
    ch.rays.push_back({RayKind::LoS, 5.0, u(rng), 0.01 * std::abs(u(rng)), 2.0 + u(rng)});
    ch.rays.push_back({RayKind::NLoS, 9.0, u(rng), 0.004 * std::abs(u(rng)), 3.0 + u(rng)});
    for (int j = 0; j < 4; ++j) {
      const double expected = brute_force_gain(ch.rays, cb.codeword(j));
      EXPECT_NEAR(equivalent_gain(ch, cb.codeword(j)), expected, 1e-15 + 1e-12 * expected);
    }
  }
}

TEST(EquivalentGain, EmptyChannelIsZero) {
  MultipathChannel ch;
  ch.num_antennas = 4;
  EXPECT_EQ(equivalent_gain(ch, build_dft_codebook(4).codeword(0)), 0.0);
}

TEST(EquivalentGain, RejectsBadCodewords) {
  MultipathChannel ch;
  ch.num_antennas = 4;
  ch.rays.push_back({RayKind::LoS, 1.0, 0.0, 1.0, 0.0});
  EXPECT_THROW(equivalent_gain(ch, build_dft_codebook(2).codeword(0)), InvalidArgument);
  ComplexVector w = ComplexVector::Constant(4, Complex(1.0, 0.0));
  EXPECT_THROW(equivalent_gain(ch, w), InvalidArgument);
}

TEST(EquivalentGain, BoresightBeatsOffAxisAtEqualDistance) {
  const DftCodebook cb = build_dft_codebook(8);
  auto best_gain = [&](double angle) {
    MultipathChannel ch;
    ch.num_antennas = 8;
    ch.rays.push_back({RayKind::LoS, 20.0, angle, 0.01, 0.0});
    double best = 0.0;
    for (int j = 0; j < cb.size(); ++j) best = std::max(best, equivalent_gain(ch, cb.codeword(j)));
    return best;
  };
  EXPECT_GE(best_gain(cb.beam_angles[4]), best_gain(std::numbers::pi / 6 + 0.05));
}

TEST(GainToDb, Conversions) {
  EXPECT_EQ(gain_to_db(1.0), 0.0);
  EXPECT_NEAR(gain_to_db(100.0), 20.0, 1e-12);
  EXPECT_EQ(gain_to_db(0.0), kSilentDb);
  EXPECT_THROW(gain_to_db(-1.0), InvalidArgument);
}
