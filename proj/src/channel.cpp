#include "ckm/channel.hpp"

#include "ckm/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace ckm {

ComplexVector steering_vector(double angle, int num_antennas) {
  if (!std::isfinite(angle)) {
    throw InvalidArgument("steering_vector: angle must be finite");
  }
  if (num_antennas < 1) {
    throw InvalidArgument("steering_vector: num_antennas must be positive");
  }
  const double spatial_freq = std::numbers::pi * std::sin(angle);
  ComplexVector a(num_antennas);
  for (int n = 0; n < num_antennas; ++n) {
    a(n) = std::polar(1.0, spatial_freq * n);
  }
  return a;
}

double beam_grid_sine(int j, int num_antennas) {
  return -1.0 + (2.0 * j + 1.0) / num_antennas;
}

DftCodebook build_dft_codebook(int num_antennas) {
  if (num_antennas < 1) {
    throw InvalidArgument("build_dft_codebook: num_antennas must be >= 1, got " +
                          std::to_string(num_antennas));
  }
  DftCodebook book;
  book.num_antennas = num_antennas;
  book.columns.resize(num_antennas, num_antennas);
  book.beam_angles.resize(num_antennas);
  const double norm = 1.0 / std::sqrt(static_cast<double>(num_antennas));
  for (int j = 0; j < num_antennas; ++j) {
    const double s = beam_grid_sine(j, num_antennas);
    book.beam_angles[j] = std::asin(s);
    // Evaluate the phase ramp from the grid sine directly so that
    // sin(asin(s)) rounding does not leak into the unitarity check.
    for (int n = 0; n < num_antennas; ++n) {
      book.columns(n, j) = norm * std::polar(1.0, std::numbers::pi * s * n);
    }
  }
  return book;
}

ComplexVector MultipathChannel::vector() const {
  ComplexVector h = ComplexVector::Zero(num_antennas);
  for (const auto& ray : rays) {
    h += std::polar(ray.amplitude, ray.phase) * steering_vector(ray.departure_angle, num_antennas);
  }
  return h;
}

double equivalent_gain(const MultipathChannel& channel,
                       const Eigen::Ref<const ComplexVector>& codeword) {
  if (codeword.size() != channel.num_antennas) {
    throw InvalidArgument("equivalent_gain: codeword length " + std::to_string(codeword.size()) +
                          " does not match " + std::to_string(channel.num_antennas) +
                          " antennas");
  }
  if (std::abs(codeword.norm() - 1.0) > 1e-9) {
    throw InvalidArgument("equivalent_gain: codeword must have unit norm");
  }
  if (channel.rays.empty()) return 0.0;
  const Complex response = channel.vector().dot(codeword);  // conjugates h
  return std::norm(response);
}

double gain_to_db(double gain) {
  if (!(gain >= 0.0)) {
    throw InvalidArgument("gain_to_db: gain must be non-negative");
  }
  if (gain == 0.0) return kSilentDb;
  return 10.0 * std::log10(gain);
}

}  // namespace ckm
