#pragma once

#include "ckm/channel.hpp"
#include "ckm/ndarray.hpp"

#include <Eigen/Core>

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace ckm {

using Point2 = Eigen::Vector2d;

/// Axis-aligned rectangular footprint. Walls reflect with coefficient gamma.
struct Building {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double gamma = 0.5;

  bool strictly_contains(const Point2& p) const {
    return p.x() > x0 && p.x() < x1 && p.y() > y0 && p.y() < y1;
  }
};

struct GridCell {
  int row = 0;  // row 0 is the north (max y) edge
  int col = 0;
};

struct Scene {
  double width_m = 64.0;
  double height_m = 64.0;
  double cell_m = 1.0;
  std::vector<Building> buildings;
  Point2 bs_position = Point2::Zero();
  double carrier_wavelength_m = 0.0857;
  std::uint64_t seed = 0;

  int nx() const;
  int ny() const;
  Point2 cell_center(int row, int col) const;
  std::optional<GridCell> cell_of(const Point2& p) const;
  bool inside_building(const Point2& p) const;
  bool in_extent(const Point2& p) const;
  /// Throws InvalidArgument if any structural invariant is violated.
  void validate() const;
};

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& doc);

/// Parameters for random urban layouts. Building sizes and positions are drawn
/// in whole cells so footprints align with the sampling grid.
struct SceneConfig {
  double width_m = 64.0;
  double height_m = 64.0;
  double cell_m = 1.0;
  int min_buildings = 5;
  int max_buildings = 15;
  int min_building_cells = 3;
  int max_building_cells = 14;
  int building_gap_cells = 1;
  double min_gamma = 0.3;
  double max_gamma = 0.9;
  double carrier_wavelength_m = 0.0857;
  /// BS is placed at a free cell centre plus a uniform offset of up to this
  /// fraction of a cell on each axis.
  double bs_jitter = 0.3;
  int max_attempts = 2000;
};

nlohmann::json scene_config_to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& doc);

/// SplitMix64 mixing of (base, index); used for all per-item derived seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Deterministic for fixed (config, seed). Throws GenerationFailure when the
/// layout cannot be placed within config.max_attempts draws.
Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

/// Re-draws the BS position of `scene` from `seed` (a free cell centre plus
/// jitter). Used for several deployments over one building layout.
void place_base_station(Scene& scene, const SceneConfig& config, std::uint64_t seed);

/// True if the open segment a-b passes through the interior of any building.
/// Touching a wall or running along it does not block.
bool segment_blocked(const Scene& scene, const Point2& a, const Point2& b);

/// Departure angle at the BS array for direction d (broadside along +y).
/// The ULA cannot tell front from back, so the result is folded into [-pi/2, pi/2].
double departure_angle(const Point2& d);

/// LoS plus first-order specular wall reflections found with the image method.
MultipathChannel trace_point(const Scene& scene, const Point2& point, int num_antennas);

struct RenderOptions {
  double dynamic_range_db = 40.0;
  /// k x k sample points per cell; linear gains are averaged before dB conversion.
  int supersample = 1;
  int threads = 1;
};

struct CkmSample {
  NdArrayD input;   // 2 x H x W: occupancy, BS one-hot
  NdArrayD target;  // N x H x W normalized gain
  NdArrayD raw_db;  // N x H x W raw gain in dB (kSilentDb where no path)
  double p_max_db = 0.0;
  double p_thre_db = 0.0;
  std::uint64_t scene_id = 0;
  std::uint64_t bs_id = 0;
  int codebook_size = 0;
};

/// Normalized value of a raw dB gain; anything below p_max - dynamic_range is 0.
double normalize_db(double p_raw_db, double p_max_db, double dynamic_range_db);

/// Throws DegenerateScene when no cell receives any path.
CkmSample render_ckm(const Scene& scene, const DftCodebook& codebook,
                     const RenderOptions& options = {});

/// dB(gain at distance d1) - dB(gain at distance d2) along a ray from the BS
/// at `angle` from broadside.
double free_space_slope_check(const Scene& scene, const Eigen::Ref<const ComplexVector>& codeword,
                              double d1, double d2, double angle = 0.0);

}  // namespace ckm
