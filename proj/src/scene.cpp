#include "ckm/scene.hpp"

#include "ckm/error.hpp"
#include "ckm/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace ckm {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

int grid_count(double extent, double cell) {
  const double n = extent / cell;
  const double rounded = std::round(n);
  if (rounded < 1.0 || std::abs(n - rounded) > 1e-9 * std::max(1.0, n)) {
    throw InvalidArgument("extent " + std::to_string(extent) +
                          " is not an integer multiple of cell size " + std::to_string(cell));
  }
  return static_cast<int>(rounded);
}

double wrap_phase(double phase) {
  double wrapped = std::fmod(phase, kTwoPi);
  if (wrapped < 0.0) wrapped += kTwoPi;
  return wrapped;
}

PropagationRay make_ray(RayKind kind, double length, const Point2& leaving, double gain_factor,
                        double wavelength) {
  PropagationRay ray;
  ray.kind = kind;
  ray.length_m = length;
  ray.departure_angle = departure_angle(leaving);
  ray.amplitude = gain_factor * wavelength / (4.0 * std::numbers::pi * length);
  ray.phase = wrap_phase(-kTwoPi * length / wavelength);
  return ray;
}

// One wall of a building: the line coord[axis] == value, spanning [lo, hi] on
// the other axis. `outward` is +1 or -1 along `axis`.
struct Wall {
  int axis;
  double value;
  double lo;
  double hi;
  int outward;
};

std::array<Wall, 4> walls_of(const Building& b) {
  return {Wall{0, b.x0, b.y0, b.y1, -1}, Wall{0, b.x1, b.y0, b.y1, +1},
          Wall{1, b.y0, b.x0, b.x1, -1}, Wall{1, b.y1, b.x0, b.x1, +1}};
}

}  // namespace

int Scene::nx() const { return grid_count(width_m, cell_m); }
int Scene::ny() const { return grid_count(height_m, cell_m); }

Point2 Scene::cell_center(int row, int col) const {
  return {(col + 0.5) * cell_m, height_m - (row + 0.5) * cell_m};
}

std::optional<GridCell> Scene::cell_of(const Point2& p) const {
  if (!in_extent(p)) return std::nullopt;
  const int col = std::min(nx() - 1, static_cast<int>(std::floor(p.x() / cell_m)));
  const int row = std::min(ny() - 1, static_cast<int>(std::floor((height_m - p.y()) / cell_m)));
  return GridCell{row, col};
}

bool Scene::inside_building(const Point2& p) const {
  return std::any_of(buildings.begin(), buildings.end(),
                     [&](const Building& b) { return b.strictly_contains(p); });
}

bool Scene::in_extent(const Point2& p) const {
  return p.x() >= 0.0 && p.x() <= width_m && p.y() >= 0.0 && p.y() <= height_m;
}

void Scene::validate() const {
  if (!(cell_m > 0.0) || !(width_m > 0.0) || !(height_m > 0.0)) {
    throw InvalidArgument("scene: extent and cell size must be positive");
  }
  nx();
  ny();
  if (!(carrier_wavelength_m > 0.0)) throw InvalidArgument("scene: wavelength must be positive");
  for (const auto& b : buildings) {
    if (!(b.x1 > b.x0) || !(b.y1 > b.y0)) throw InvalidArgument("scene: degenerate building");
    if (b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > width_m || b.y1 > height_m) {
      throw InvalidArgument("scene: building outside map extent");
    }
    if (!(b.gamma >= 0.0 && b.gamma <= 1.0)) {
      throw InvalidArgument("scene: reflection coefficient outside [0, 1]");
    }
  }
  if (!in_extent(bs_position)) throw InvalidArgument("scene: BS outside map extent");
  if (inside_building(bs_position)) throw InvalidArgument("scene: BS inside a building");
}

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json buildings = nlohmann::json::array();
  for (const auto& b : scene.buildings) {
    buildings.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"gamma", b.gamma}});
  }
  return {{"extent", {scene.width_m, scene.height_m}},
          {"cell_m", scene.cell_m},
          {"wavelength_m", scene.carrier_wavelength_m},
          {"bs", {scene.bs_position.x(), scene.bs_position.y()}},
          {"buildings", buildings},
          {"seed", scene.seed}};
}

Scene scene_from_json(const nlohmann::json& doc) {
  Scene scene;
  try {
    scene.width_m = doc.at("extent").at(0).get<double>();
    scene.height_m = doc.at("extent").at(1).get<double>();
    scene.cell_m = doc.at("cell_m").get<double>();
    scene.carrier_wavelength_m = doc.value("wavelength_m", scene.carrier_wavelength_m);
    scene.bs_position = {doc.at("bs").at(0).get<double>(), doc.at("bs").at(1).get<double>()};
    for (const auto& b : doc.at("buildings")) {
      scene.buildings.push_back({b.at("x0").get<double>(), b.at("y0").get<double>(),
                                 b.at("x1").get<double>(), b.at("y1").get<double>(),
                                 b.at("gamma").get<double>()});
    }
    scene.seed = doc.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("scene JSON: ") + e.what());
  }
  scene.validate();
  return scene;
}

nlohmann::json scene_config_to_json(const SceneConfig& c) {
  return {{"width_m", c.width_m},
          {"height_m", c.height_m},
          {"cell_m", c.cell_m},
          {"min_buildings", c.min_buildings},
          {"max_buildings", c.max_buildings},
          {"min_building_cells", c.min_building_cells},
          {"max_building_cells", c.max_building_cells},
          {"building_gap_cells", c.building_gap_cells},
          {"min_gamma", c.min_gamma},
          {"max_gamma", c.max_gamma},
          {"carrier_wavelength_m", c.carrier_wavelength_m},
          {"bs_jitter", c.bs_jitter},
          {"max_attempts", c.max_attempts}};
}

SceneConfig scene_config_from_json(const nlohmann::json& doc) {
  SceneConfig c;
  c.width_m = doc.value("width_m", c.width_m);
  c.height_m = doc.value("height_m", c.height_m);
  c.cell_m = doc.value("cell_m", c.cell_m);
  c.min_buildings = doc.value("min_buildings", c.min_buildings);
  c.max_buildings = doc.value("max_buildings", c.max_buildings);
  c.min_building_cells = doc.value("min_building_cells", c.min_building_cells);
  c.max_building_cells = doc.value("max_building_cells", c.max_building_cells);
  c.building_gap_cells = doc.value("building_gap_cells", c.building_gap_cells);
  c.min_gamma = doc.value("min_gamma", c.min_gamma);
  c.max_gamma = doc.value("max_gamma", c.max_gamma);
  c.carrier_wavelength_m = doc.value("carrier_wavelength_m", c.carrier_wavelength_m);
  c.bs_jitter = doc.value("bs_jitter", c.bs_jitter);
  c.max_attempts = doc.value("max_attempts", c.max_attempts);
  return c;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  if (config.min_buildings < 0 || config.max_buildings < config.min_buildings ||
      config.min_building_cells < 1 || config.max_building_cells < config.min_building_cells ||
      config.min_gamma < 0.0 || config.max_gamma > 1.0 || config.max_gamma < config.min_gamma ||
      config.bs_jitter < 0.0 || config.bs_jitter >= 0.5) {
    throw InvalidArgument("generate_scene: inconsistent scene configuration");
  }
  Scene scene;
  scene.width_m = config.width_m;
  scene.height_m = config.height_m;
  scene.cell_m = config.cell_m;
  scene.carrier_wavelength_m = config.carrier_wavelength_m;
  scene.seed = seed;
  const int nx = scene.nx();
  const int ny = scene.ny();
  if (config.max_building_cells > std::min(nx, ny)) {
    throw InvalidArgument("generate_scene: building size exceeds map");
  }

  std::mt19937_64 rng(seed);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto uniform_real = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };

  struct CellRect {
    int x0, y0, x1, y1;  // half-open, in cells, y from south
  };
  std::vector<CellRect> placed;
  const int count = uniform_int(config.min_buildings, config.max_buildings);
  const int gap = config.building_gap_cells;
  int attempts = 0;
  while (static_cast<int>(placed.size()) < count) {
    if (++attempts > config.max_attempts) {
      throw GenerationFailure("generate_scene: could not place " + std::to_string(count) +
                              " buildings within " + std::to_string(config.max_attempts) +
                              " attempts");
    }
    const int w = uniform_int(config.min_building_cells, config.max_building_cells);
    const int h = uniform_int(config.min_building_cells, config.max_building_cells);
    const int x0 = uniform_int(0, nx - w);
    const int y0 = uniform_int(0, ny - h);
    const CellRect r{x0, y0, x0 + w, y0 + h};
    const bool clash = std::any_of(placed.begin(), placed.end(), [&](const CellRect& o) {
      return r.x0 < o.x1 + gap && o.x0 < r.x1 + gap && r.y0 < o.y1 + gap && o.y0 < r.y1 + gap;
    });
    if (clash) continue;
    placed.push_back(r);
    const double gamma = uniform_real(config.min_gamma, config.max_gamma);
    scene.buildings.push_back({r.x0 * config.cell_m, r.y0 * config.cell_m, r.x1 * config.cell_m,
                               r.y1 * config.cell_m, gamma});
  }

  place_base_station(scene, config, derive_seed(seed, 0xB5));
  return scene;
}

void place_base_station(Scene& scene, const SceneConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int nx = scene.nx();
  const int ny = scene.ny();
  for (int attempt = 0;; ++attempt) {
    if (attempt >= config.max_attempts) {
      throw GenerationFailure("place_base_station: no free cell for the BS");
    }
    const int row = std::uniform_int_distribution<int>(0, ny - 1)(rng);
    const int col = std::uniform_int_distribution<int>(0, nx - 1)(rng);
    std::uniform_real_distribution<double> jitter(-config.bs_jitter, config.bs_jitter);
    const double jx = jitter(rng);
    const double jy = jitter(rng);
    const Point2 center = scene.cell_center(row, col);
    if (scene.inside_building(center)) continue;
    scene.bs_position = center + scene.cell_m * Point2(jx, jy);
    break;
  }
  scene.validate();
}

bool segment_blocked(const Scene& scene, const Point2& a, const Point2& b) {
  const Point2 d = b - a;
  for (const auto& bld : scene.buildings) {
    // Liang-Barsky clip against the closed rectangle.
    double t0 = 0.0;
    double t1 = 1.0;
    bool outside = false;
    const double lo[2] = {bld.x0, bld.y0};
    const double hi[2] = {bld.x1, bld.y1};
    for (int axis = 0; axis < 2 && !outside; ++axis) {
      if (d[axis] == 0.0) {
        if (a[axis] < lo[axis] || a[axis] > hi[axis]) outside = true;
        continue;
      }
      double ta = (lo[axis] - a[axis]) / d[axis];
      double tb = (hi[axis] - a[axis]) / d[axis];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) outside = true;
    }
    if (outside || t1 - t0 <= 1e-12) continue;
    // A chord through the interior has its midpoint strictly inside; a chord
    // along a wall does not.
    const Point2 mid = a + 0.5 * (t0 + t1) * d;
    constexpr double margin = 1e-9;
    if (mid.x() > bld.x0 + margin && mid.x() < bld.x1 - margin && mid.y() > bld.y0 + margin &&
        mid.y() < bld.y1 - margin) {
      return true;
    }
  }
  return false;
}

double departure_angle(const Point2& d) { return std::atan2(d.x(), std::abs(d.y())); }

MultipathChannel trace_point(const Scene& scene, const Point2& point, int num_antennas) {
  if (num_antennas < 1) throw InvalidArgument("trace_point: num_antennas must be positive");
  if (!scene.in_extent(point)) throw InvalidArgument("trace_point: point outside map extent");
  if (scene.inside_building(point)) throw InvalidArgument("trace_point: point inside a building");

  MultipathChannel channel;
  channel.num_antennas = num_antennas;
  const Point2& bs = scene.bs_position;
  const double wavelength = scene.carrier_wavelength_m;

  const Point2 direct = point - bs;
  const double direct_len = direct.norm();
  if (direct_len > 0.0 && !segment_blocked(scene, bs, point)) {
    channel.rays.push_back(make_ray(RayKind::LoS, direct_len, direct, 1.0, wavelength));
  }

  for (const auto& bld : scene.buildings) {
    for (const Wall& wall : walls_of(bld)) {
      const int a = wall.axis;
      const int o = 1 - a;
      // Both endpoints must sit strictly on the wall's outer side.
      if ((bs[a] - wall.value) * wall.outward <= 0.0) continue;
      if ((point[a] - wall.value) * wall.outward <= 0.0) continue;
      Point2 image = bs;
      image[a] = 2.0 * wall.value - bs[a];
      const double t = (wall.value - image[a]) / (point[a] - image[a]);
      Point2 hit;
      hit[a] = wall.value;
      hit[o] = image[o] + t * (point[o] - image[o]);
      if (hit[o] < wall.lo || hit[o] > wall.hi) continue;
      if (segment_blocked(scene, bs, hit) || segment_blocked(scene, hit, point)) continue;
      const double len = (hit - bs).norm() + (point - hit).norm();
      channel.rays.push_back(make_ray(RayKind::NLoS, len, hit - bs, bld.gamma, wavelength));
    }
  }
  return channel;
}

double normalize_db(double p_raw_db, double p_max_db, double dynamic_range_db) {
  const double p_thre_db = p_max_db - dynamic_range_db;
  if (!(p_raw_db >= p_thre_db)) return 0.0;
  return (p_raw_db - p_thre_db) / (p_max_db - p_thre_db);
}

CkmSample render_ckm(const Scene& scene, const DftCodebook& codebook,
                     const RenderOptions& options) {
  scene.validate();
  if (options.supersample < 1) throw InvalidArgument("render_ckm: supersample must be >= 1");
  if (!(options.dynamic_range_db > 0.0)) {
    throw InvalidArgument("render_ckm: dynamic range must be positive");
  }
  const int ny = scene.ny();
  const int nx = scene.nx();
  const int beams = codebook.size();
  const int antennas = codebook.num_antennas;

  CkmSample sample;
  sample.codebook_size = beams;
  sample.input = NdArrayD({2, ny, nx});
  sample.raw_db = NdArrayD({beams, ny, nx}, kSilentDb);
  sample.target = NdArrayD({beams, ny, nx});

  const GridCell bs_cell = *scene.cell_of(scene.bs_position);
  for (int r = 0; r < ny; ++r) {
    for (int c = 0; c < nx; ++c) {
      sample.input.at(0, r, c) = scene.inside_building(scene.cell_center(r, c)) ? 1.0 : 0.0;
    }
  }
  sample.input.at(1, bs_cell.row, bs_cell.col) = 1.0;

  const ComplexMatrix codewords_h = codebook.columns.adjoint();
  const int k = options.supersample;
  parallel_for(static_cast<std::size_t>(ny), options.threads, [&](std::size_t row_index) {
    const int r = static_cast<int>(row_index);
    Eigen::VectorXd gains(beams);
    for (int c = 0; c < nx; ++c) {
      if (sample.input.at(0, r, c) != 0.0 || sample.input.at(1, r, c) != 0.0) continue;
      gains.setZero();
      int samples = 0;
      const Point2 corner = scene.cell_center(r, c) - Point2(0.5, 0.5) * scene.cell_m;
      for (int sy = 0; sy < k; ++sy) {
        for (int sx = 0; sx < k; ++sx) {
          const Point2 p = corner + scene.cell_m * Point2((sx + 0.5) / k, (sy + 0.5) / k);
          if (scene.inside_building(p)) continue;
          const MultipathChannel channel = trace_point(scene, p, antennas);
          if (!channel.rays.empty()) {
            gains += (codewords_h * channel.vector()).cwiseAbs2();
          }
          ++samples;
        }
      }
      if (samples == 0) continue;
      gains /= samples;
      for (int j = 0; j < beams; ++j) sample.raw_db.at(j, r, c) = gain_to_db(gains[j]);
    }
  });

  const double p_max = sample.raw_db.data.maxCoeff();
  if (!std::isfinite(p_max)) {
    throw DegenerateScene("render_ckm: no grid cell receives any path from the BS");
  }
  sample.p_max_db = p_max;
  sample.p_thre_db = p_max - options.dynamic_range_db;
  for (int j = 0; j < beams; ++j) {
    for (int r = 0; r < ny; ++r) {
      for (int c = 0; c < nx; ++c) {
        const bool fixed = sample.input.at(0, r, c) != 0.0 || sample.input.at(1, r, c) != 0.0;
        sample.target.at(j, r, c) =
            fixed ? 1.0 : normalize_db(sample.raw_db.at(j, r, c), p_max, options.dynamic_range_db);
      }
    }
  }
  return sample;
}

double free_space_slope_check(const Scene& scene, const Eigen::Ref<const ComplexVector>& codeword,
                              double d1, double d2, double angle) {
  const Point2 dir(std::sin(angle), std::cos(angle));
  const int antennas = static_cast<int>(codeword.size());
  const double g1 = equivalent_gain(trace_point(scene, scene.bs_position + d1 * dir, antennas), codeword);
  const double g2 = equivalent_gain(trace_point(scene, scene.bs_position + d2 * dir, antennas), codeword);
  return gain_to_db(g1) - gain_to_db(g2);
}

}  // namespace ckm
