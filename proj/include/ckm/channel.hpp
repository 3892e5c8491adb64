#pragma once

#include <Eigen/Dense>

#include <complex>
#include <limits>
#include <vector>

namespace ckm {

using Complex = std::complex<double>;
using ComplexVector = Eigen::VectorXcd;
using ComplexMatrix = Eigen::MatrixXcd;

/// Half-wavelength ULA response: entry n is exp(i*pi*n*sin(angle)).
/// Angles are measured from the array broadside. Throws InvalidArgument for a
/// non-finite angle or a non-positive antenna count.
ComplexVector steering_vector(double angle, int num_antennas);

/// N-column DFT precoding matrix. Column j steers towards beam_angles[j], with
/// sin(beam_angles[j]) = -1 + (2j + 1) / N, which makes the matrix unitary.
struct DftCodebook {
  int num_antennas = 0;
  ComplexMatrix columns;
  std::vector<double> beam_angles;

  int size() const { return static_cast<int>(columns.cols()); }
  ComplexVector codeword(int j) const { return columns.col(j); }
};

DftCodebook build_dft_codebook(int num_antennas);

/// Sine of the j-th beam angle on the default grid.
double beam_grid_sine(int j, int num_antennas);

enum class RayKind { LoS, NLoS };

struct PropagationRay {
  RayKind kind = RayKind::LoS;
  double length_m = 0.0;
  double departure_angle = 0.0;  // radians from broadside, in [-pi/2, pi/2]
  double amplitude = 0.0;        // linear field amplitude
  double phase = 0.0;            // radians in [0, 2*pi)
};

struct MultipathChannel {
  std::vector<PropagationRay> rays;
  int num_antennas = 1;

  /// h = sum over rays of amplitude * exp(i*phase) * a(departure_angle).
  ComplexVector vector() const;
};

/// Beamformed power gain |h^H w|^2. The codeword must match the array size
/// and have unit norm (within 1e-9).
double equivalent_gain(const MultipathChannel& channel,
                       const Eigen::Ref<const ComplexVector>& codeword);

/// Sentinel used for a zero gain.
inline constexpr double kSilentDb = -std::numeric_limits<double>::infinity();

/// 10*log10(gain), or kSilentDb when gain == 0.
double gain_to_db(double gain);

}  // namespace ckm
