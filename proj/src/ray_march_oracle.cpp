#include "ckm/ray_march_oracle.hpp"

#include "ckm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ckm {
namespace {

double cross(const Point2& u, const Point2& v) { return u.x() * v.y() - u.y() * v.x(); }

bool properly_crosses(const Point2& p, const Point2& q, const Point2& a, const Point2& b) {
  const double d1 = cross(q - p, a - p);
  const double d2 = cross(q - p, b - p);
  const double d3 = cross(b - a, p - a);
  const double d4 = cross(b - a, q - a);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

RayMarchOracle::RayMarchOracle(const Scene& scene, double angular_step_deg) : scene_(scene) {
  for (int i = 0; i < static_cast<int>(scene.buildings.size()); ++i) {
    const auto& b = scene.buildings[i];
    const Point2 sw(b.x0, b.y0), se(b.x1, b.y0), ne(b.x1, b.y1), nw(b.x0, b.y1);
    walls_.push_back({sw, nw, i, 0});
    walls_.push_back({se, ne, i, 0});
    walls_.push_back({sw, se, i, 1});
    walls_.push_back({nw, ne, i, 1});
  }
  const int steps = static_cast<int>(std::lround(360.0 / angular_step_deg));
  for (int k = 0; k <= steps; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / steps;
    const Hit hit = first_hit(angle);
    // Where the first-hit wall changes between two steps, bisect the launch
    // angle down to the wall end and keep a sample on each side, so every
    // wall's interval is covered up to its endpoints.
    if (k > 0 && hit.wall != hits_.back().wall) {
      const double prev_angle = launch_angles_.back();
      const Hit prev = hits_.back();
      // Last angle still on the previous wall, then first angle on the new one.
      const auto [end_angle, end_hit] = refine_edge(prev_angle, angle, prev.wall, true);
      const auto [start_angle, start_hit] = refine_edge(prev_angle, angle, hit.wall, false);
      if (prev.wall >= 0 && end_angle != prev_angle) {
        launch_angles_.push_back(end_angle);
        hits_.push_back(end_hit);
      }
      if (hit.wall >= 0 && start_angle != angle && start_angle > launch_angles_.back()) {
        launch_angles_.push_back(start_angle);
        hits_.push_back(start_hit);
      }
    }
    launch_angles_.push_back(angle);
    hits_.push_back(hit);
  }
}

std::pair<double, RayMarchOracle::Hit> RayMarchOracle::refine_edge(double lo, double hi, int wall,
                                                                   bool wall_at_lo) const {
  // Invariant: the end named by wall_at_lo hits `wall`, the other does not.
  Hit kept = first_hit(wall_at_lo ? lo : hi);
  for (int iter = 0; iter < 80; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const Hit m = first_hit(mid);
    if ((m.wall == wall) == wall_at_lo) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (m.wall == wall) kept = m;
  }
  return {wall_at_lo ? lo : hi, kept};
}

RayMarchOracle::Hit RayMarchOracle::first_hit(double launch_angle) const {
  const Point2 origin = scene_.bs_position;
  const Point2 dir(std::cos(launch_angle), std::sin(launch_angle));
  Hit best;
  double best_t = std::numeric_limits<double>::infinity();
  for (int w = 0; w < static_cast<int>(walls_.size()); ++w) {
    const Segment& s = walls_[w];
    const Point2 edge = s.b - s.a;
    const double denom = cross(dir, edge);
    if (denom == 0.0) continue;
    const Point2 rel = s.a - origin;
    const double t = cross(rel, edge) / denom;
    const double u = cross(rel, dir) / denom;
    if (t <= 0.0 || u < 0.0 || u > 1.0) continue;
    if (t < best_t) {
      best_t = t;
      best.wall = w;
    }
  }
  if (best.wall >= 0) {
    const Segment& s = walls_[best.wall];
    best.point = origin + best_t * dir;
    // Snap onto the wall line so rounding cannot leave the point inside the building.
    best.point[s.axis] = s.a[s.axis];
    best.reflected = dir;
    best.reflected[walls_[best.wall].axis] = -dir[walls_[best.wall].axis];
  }
  return best;
}

bool RayMarchOracle::crosses_any(const Point2& p, const Point2& q, int skip_wall) const {
  for (int w = 0; w < static_cast<int>(walls_.size()); ++w) {
    if (w != skip_wall && properly_crosses(p, q, walls_[w].a, walls_[w].b)) return true;
  }
  return false;
}

bool RayMarchOracle::line_of_sight(const Point2& point) const {
  return !crosses_any(scene_.bs_position, point);
}

MultipathChannel RayMarchOracle::trace(const Point2& point, int num_antennas) const {
  MultipathChannel channel;
  channel.num_antennas = num_antennas;
  const Point2& bs = scene_.bs_position;
  const double lambda = scene_.carrier_wavelength_m;
  auto add_ray = [&](RayKind kind, double length, const Point2& leaving, double factor) {
    PropagationRay ray;
    ray.kind = kind;
    ray.length_m = length;
    ray.departure_angle = std::asin(std::clamp(leaving.x() / leaving.norm(), -1.0, 1.0));
    ray.amplitude = factor * lambda / (4.0 * std::numbers::pi * length);
    ray.phase = std::fmod(-2.0 * std::numbers::pi * (length / lambda), 2.0 * std::numbers::pi);
    if (ray.phase < 0.0) ray.phase += 2.0 * std::numbers::pi;
    channel.rays.push_back(ray);
  };

  if ((point - bs).norm() > 0.0 && line_of_sight(point)) {
    add_ray(RayKind::LoS, (point - bs).norm(), point - bs, 1.0);
  }

  auto miss = [&](const Hit& h) { return cross(h.reflected, point - h.point); };
  std::vector<int> used_walls;
  for (std::size_t k = 0; k + 1 < hits_.size(); ++k) {
    const Hit& h0 = hits_[k];
    const Hit& h1 = hits_[k + 1];
    if (h0.wall < 0 || h0.wall != h1.wall) continue;
    const double f0 = miss(h0);
    const double f1 = miss(h1);
    const bool bracket = (f0 < 0.0 && f1 >= 0.0) || (f0 > 0.0 && f1 <= 0.0);
    if (!bracket) continue;

    double lo = launch_angles_[k];
    double hi = launch_angles_[k + 1];
    double f_lo = f0;
    Hit found = f1 == 0.0 ? h1 : h0;
    for (int iter = 0; iter < 200 && f1 != 0.0; ++iter) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      const Hit hm = first_hit(mid);
      if (hm.wall != h0.wall) break;
      found = hm;
      const double fm = miss(hm);
      if (fm == 0.0) break;
      if ((fm < 0.0) == (f_lo < 0.0)) {
        lo = mid;
        f_lo = fm;
      } else {
        hi = mid;
      }
    }
    if (found.reflected.dot(point - found.point) <= 0.0) continue;
    if (crosses_any(found.point, point, found.wall)) continue;
    if (std::find(used_walls.begin(), used_walls.end(), found.wall) != used_walls.end()) continue;
    used_walls.push_back(found.wall);
    const double length = (found.point - bs).norm() + (point - found.point).norm();
    add_ray(RayKind::NLoS, length, found.point - bs,
            scene_.buildings[walls_[found.wall].building].gamma);
  }
  return channel;
}

nlohmann::json OracleReport::to_json() const {
  return {{"cells_checked", cells_checked},
          {"los_mismatches", los_mismatches},
          {"ray_count_mismatches", ray_count_mismatches},
          {"max_channel_deviation", max_channel_deviation},
          {"max_amplitude_deviation", max_amplitude_deviation},
          {"channel_tolerance", channel_tolerance},
          {"amplitude_tolerance", amplitude_tolerance},
          {"pass", pass}};
}

OracleReport oracle_check(const Scene& scene, int num_antennas, const Tracer& tracer) {
  scene.validate();
  if (num_antennas < 1) throw InvalidArgument("oracle_check: num_antennas must be positive");
  const RayMarchOracle oracle(scene);
  const auto bs_cell = *scene.cell_of(scene.bs_position);
  OracleReport report;

  auto sorted_amplitudes = [](const MultipathChannel& ch) {
    std::vector<PropagationRay> rays = ch.rays;
    std::sort(rays.begin(), rays.end(), [](const auto& a, const auto& b) {
      if (a.kind != b.kind) return a.kind == RayKind::LoS;
      return a.length_m < b.length_m;
    });
    return rays;
  };

  for (int r = 0; r < scene.ny(); ++r) {
    for (int c = 0; c < scene.nx(); ++c) {
      const Point2 p = scene.cell_center(r, c);
      if (scene.inside_building(p) || (r == bs_cell.row && c == bs_cell.col)) continue;
      ++report.cells_checked;
      const MultipathChannel fast = tracer(scene, p, num_antennas);
      const MultipathChannel slow = oracle.trace(p, num_antennas);
      const bool fast_los = std::any_of(fast.rays.begin(), fast.rays.end(),
                                        [](const auto& ray) { return ray.kind == RayKind::LoS; });
      const bool slow_los = std::any_of(slow.rays.begin(), slow.rays.end(),
                                        [](const auto& ray) { return ray.kind == RayKind::LoS; });
      if (fast_los != slow_los) ++report.los_mismatches;
      if (fast.rays.size() != slow.rays.size()) {
        ++report.ray_count_mismatches;
      } else {
        const auto a = sorted_amplitudes(fast);
        const auto b = sorted_amplitudes(slow);
        for (std::size_t i = 0; i < a.size(); ++i) {
          report.max_amplitude_deviation =
              std::max(report.max_amplitude_deviation, std::abs(a[i].amplitude - b[i].amplitude));
        }
      }
      report.max_channel_deviation = std::max(
          report.max_channel_deviation, (fast.vector() - slow.vector()).cwiseAbs().maxCoeff());
    }
  }
  report.pass = report.los_mismatches == 0 && report.ray_count_mismatches == 0 &&
                report.max_channel_deviation <= report.channel_tolerance &&
                report.max_amplitude_deviation <= report.amplitude_tolerance;
  return report;
}

}  // namespace ckm
