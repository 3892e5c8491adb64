#pragma once

#include "ckm/scene.hpp"

#include "json.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace ckm {

/// Brute-force reference tracer. Launches rays from the BS on a dense angular
/// grid, records the first wall each one hits, and finds specular paths to a
/// receiver by locating sign changes of the reflected ray's miss distance and
/// refining them by bisection. Launch angles where the first-hit wall changes
/// are themselves bisected so sampling reaches each wall's endpoints. LoS visibility uses proper segment-crossing tests.
/// Shares no geometry code with trace_point.
class RayMarchOracle {
 public:
  explicit RayMarchOracle(const Scene& scene, double angular_step_deg = 0.01);

  MultipathChannel trace(const Point2& point, int num_antennas) const;
  bool line_of_sight(const Point2& point) const;

 private:
  struct Segment {
    Point2 a;
    Point2 b;
    int building;
    int axis;  // axis of the wall normal
  };
  struct Hit {
    int wall = -1;
    Point2 point = Point2::Zero();
    Point2 reflected = Point2::Zero();
  };

  Hit first_hit(double launch_angle) const;
  std::pair<double, Hit> refine_edge(double lo, double hi, int wall, bool wall_at_lo) const;
  bool crosses_any(const Point2& p, const Point2& q, int skip_wall = -1) const;

  const Scene& scene_;
  std::vector<Segment> walls_;
  std::vector<double> launch_angles_;
  std::vector<Hit> hits_;
};

using Tracer = std::function<MultipathChannel(const Scene&, const Point2&, int)>;

struct OracleReport {
  int cells_checked = 0;
  int los_mismatches = 0;
  int ray_count_mismatches = 0;
  double max_channel_deviation = 0.0;
  double max_amplitude_deviation = 0.0;
  double channel_tolerance = 1e-9;
  double amplitude_tolerance = 1e-9;
  bool pass = false;

  nlohmann::json to_json() const;
};

/// Compares `tracer` (the image-method tracer by default) against the
/// brute-force oracle at every free grid-cell centre.
OracleReport oracle_check(const Scene& scene, int num_antennas, const Tracer& tracer = trace_point);

}  // namespace ckm
