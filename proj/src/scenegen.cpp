#include "aop/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "aop/parallel.hpp"
#include "aop/rng.hpp"

namespace aop {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kMaxTries = 100;
constexpr double kMaxRange = 60.0;

struct Ray {
  double ox, oy, oz, dx, dy, dz;
};

double hit_box(const Ray& ray, const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  // Ray in the box frame.
  const double px = ray.ox - b.x, py = ray.oy - b.y, pz = ray.oz - b.z;
  const double o[3] = {c * px + s * py, -s * px + c * py, pz};
  const double d[3] = {c * ray.dx + s * ray.dy, -s * ray.dx + c * ray.dy, ray.dz};
  const double half[3] = {b.l / 2, b.w / 2, b.h / 2};
  double t0 = 0, t1 = kInf;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-12) {
      if (std::abs(o[k]) > half[k]) return kInf;
      continue;
    }
    double a = (-half[k] - o[k]) / d[k], bb = (half[k] - o[k]) / d[k];
    if (a > bb) std::swap(a, bb);
    t0 = std::max(t0, a);
    t1 = std::min(t1, bb);
    if (t0 > t1) return kInf;
  }
  return t0 > 0 ? t0 : kInf;
}

double hit_cylinder(const Ray& ray, const Box3D& b) {
  const double r = b.l / 2;
  const double zlo = b.z - b.h / 2, zhi = b.z + b.h / 2;
  double best = kInf;
  const double px = ray.ox - b.x, py = ray.oy - b.y;
  const double a = ray.dx * ray.dx + ray.dy * ray.dy;
  if (a > 1e-12) {
    const double bq = 2 * (px * ray.dx + py * ray.dy);
    const double cq = px * px + py * py - r * r;
    const double disc = bq * bq - 4 * a * cq;
    if (disc >= 0) {
      const double t = (-bq - std::sqrt(disc)) / (2 * a);
      const double z = ray.oz + t * ray.dz;
      if (t > 0 && z >= zlo && z <= zhi) best = t;
    }
  }
  if (std::abs(ray.dz) > 1e-12) {
    for (double zc : {zlo, zhi}) {
      const double t = (zc - ray.oz) / ray.dz;
      const double x = px + t * ray.dx, y = py + t * ray.dy;
      if (t > 0 && x * x + y * y <= r * r) best = std::min(best, t);
    }
  }
  return best;
}

/// Truncated normal in [-3, 3].
double truncated_normal(Rng& rng) {
  for (;;) {
    const double v = rng.normal();
    if (std::abs(v) <= 3.0) return v;
  }
}

struct Walls {
  double xp, xn, yp, yn;
};

bool place_objects(const SceneSpec& spec, Rng& rng, std::vector<SceneObject>& objects) {
  struct Pending {
    int semantic;
    int cls;
  };
  std::vector<Pending> todo;
  for (int i = 0; i < spec.cars; ++i) todo.push_back({kCar, 0});
  for (int i = 0; i < spec.pedestrians; ++i) todo.push_back({kPedestrian, 1});
  for (int i = 0; i < spec.barriers; ++i) todo.push_back({kBarrier, 2});
  const double pitch_x = spec.grid.vx() * spec.coarse_factor, pitch_y = spec.grid.vy() * spec.coarse_factor;
  struct Placed {
    double az, half_width;
    int row, col;
  };
  std::vector<Placed> placed;
  for (const auto& p : todo) {
    SceneObject obj;
    obj.semantic = p.semantic;
    obj.box.cls = p.cls;
    Box3D& b = obj.box;
    if (p.semantic == kCar) {
      b.l = rng.uniform(3.8, 4.6);
      b.w = rng.uniform(1.7, 2.0);
      b.h = rng.uniform(1.4, 1.7);
    } else if (p.semantic == kPedestrian) {
      obj.shape = ShapeKind::Cylinder;
      b.l = b.w = 2 * rng.uniform(0.3, 0.4);
      b.h = rng.uniform(1.6, 1.9);
    } else {
      b.l = rng.uniform(2.0, 2.5);
      b.w = rng.uniform(0.3, 0.4);
      b.h = rng.uniform(0.9, 1.1);
    }
    b.z = spec.ground_z + b.h / 2;
    b.yaw = obj.shape == ShapeKind::Cylinder ? 0.0 : rng.uniform(-M_PI, M_PI);
    const double bound = 0.5 * std::hypot(b.l, b.w);
    bool ok = false;
    for (int attempt = 0; attempt < kMaxTries && !ok; ++attempt) {
      const double rho = rng.uniform(spec.min_radius, spec.max_radius);
      const double az = rng.uniform(-M_PI, M_PI);
      b.x = rho * std::cos(az);
      b.y = rho * std::sin(az);
      // Angular half-width of the bounding circle plus a 1 m gap.
      const double half = std::asin(std::min(1.0, bound / rho)) + 1.0 / rho;
      const int col = static_cast<int>(std::floor((b.x - spec.grid.x_min) / pitch_x));
      const int row = static_cast<int>(std::floor((b.y - spec.grid.y_min) / pitch_y));
      ok = true;
      for (const auto& q : placed) {
        const double gap = std::abs(normalize_yaw(az - q.az));
        if (gap < half + q.half_width || std::max(std::abs(row - q.row), std::abs(col - q.col)) < 2) {
          ok = false;
          break;
        }
      }
      if (ok) placed.push_back({az, half, row, col});
    }
    if (!ok) return false;
    objects.push_back(obj);
  }
  return true;
}

float intensity_of(int semantic) {
  switch (semantic) {
    case kGround: return 0.1f;
    case kWall: return 0.4f;
    case kCar: return 0.8f;
    case kPedestrian: return 0.6f;
    default: return 1.0f;
  }
}

}  // namespace

std::uint64_t scene_seed(std::uint64_t base, int index) {
  // splitmix64 of (base, index).
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

SceneSample generate_scene(const SceneSpec& spec) {
  if (spec.cars < 0 || spec.pedestrians < 0 || spec.barriers < 0) throw ConfigError("scene: negative object count");
  if (!(spec.noise_sigma >= 0)) throw ConfigError("scene: noise_sigma must be >= 0");
  if (!(spec.min_radius > 0 && spec.max_radius > spec.min_radius && spec.wall_min > spec.max_radius &&
        spec.wall_max >= spec.wall_min)) {
    throw ConfigError("scene: need 0 < min_radius < max_radius < wall_min <= wall_max");
  }
  SceneSample out;
  std::uint64_t seed = spec.seed;
  Rng rng(seed);
  std::vector<SceneObject> objects;
  while (!place_objects(spec, rng, objects)) {
    ++out.placement_retries;
    std::clog << "scenegen: placement failed for seed " << seed << ", retrying with next sub-seed\n";
    if (out.placement_retries > 1000) throw ConfigError("scene: cannot place objects; too many for the area");
    seed = scene_seed(spec.seed, out.placement_retries);
    rng = Rng(seed);
    objects.clear();
  }
  out.used_seed = seed;
  Walls walls{rng.uniform(spec.wall_min, spec.wall_max), rng.uniform(spec.wall_min, spec.wall_max),
              rng.uniform(spec.wall_min, spec.wall_max), rng.uniform(spec.wall_min, spec.wall_max)};
  const double wall_top = spec.ground_z + spec.wall_height;

  const auto& s = spec.sensor;
  const double up = s.fov_up_deg * M_PI / 180.0, down = s.fov_down_deg * M_PI / 180.0;
  for (int r = 0; r < s.height; ++r) {
    const double incl = up - (r + 0.5) / s.height * (up - down);
    for (int c = 0; c < s.width; ++c) {
      const double az = (c + 0.5) / s.width * 2 * M_PI - M_PI;
      Ray ray{0, 0, 0, std::cos(incl) * std::cos(az), std::cos(incl) * std::sin(az), std::sin(incl)};
      double best = kMaxRange;
      int semantic = -1;
      std::uint32_t instance = 0;
      if (ray.dz < 0) {
        const double t = (spec.ground_z - ray.oz) / ray.dz;
        if (t < best) best = t, semantic = kGround;
      }
      auto wall = [&](double t) {
        if (t <= 0 || t >= best) return;
        const double x = ray.dx * t, y = ray.dy * t, z = ray.dz * t;
        if (z < spec.ground_z || z > wall_top) return;
        if (x < -walls.xn - 1e-9 || x > walls.xp + 1e-9 || y < -walls.yn - 1e-9 || y > walls.yp + 1e-9) return;
        best = t;
        semantic = kWall;
      };
      if (ray.dx > 0) wall(walls.xp / ray.dx);
      if (ray.dx < 0) wall(-walls.xn / ray.dx);
      if (ray.dy > 0) wall(walls.yp / ray.dy);
      if (ray.dy < 0) wall(-walls.yn / ray.dy);
      for (std::size_t k = 0; k < objects.size(); ++k) {
        const auto& o = objects[k];
        const double t = o.shape == ShapeKind::Cylinder ? hit_cylinder(ray, o.box) : hit_box(ray, o.box);
        if (t < best) {
          best = t;
          semantic = o.semantic;
          instance = static_cast<std::uint32_t>(k + 1);
        }
      }
      if (semantic < 0) continue;
      const double range = best + spec.noise_sigma * truncated_normal(rng);
      out.points.push_back({static_cast<float>(ray.dx * range), static_cast<float>(ray.dy * range),
                            static_cast<float>(ray.dz * range), intensity_of(semantic)});
      out.labels.push_back({static_cast<std::uint16_t>(semantic), instance});
    }
  }
  for (const auto& o : objects) out.boxes.push_back(o.box);
  out.objects = std::move(objects);
  return out;
}

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

void write_boxes_csv(const std::string& path, const std::vector<Box3D>& boxes) {
  std::ostringstream os;
  os << "class,x,y,z,l,w,h,yaw\n";
  char buf[512];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", b.cls, b.x, b.y, b.z, b.l, b.w,
                  b.h, b.yaw);
    os << buf;
  }
  write_file(path, os.str());
}

std::vector<Box3D> read_boxes_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<Box3D> out;
  if (!std::getline(in, line) || line != "class,x,y,z,l,w,h,yaw") throw IoError(path + ": bad boxes.csv header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Box3D b;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &b.cls, &b.x, &b.y, &b.z, &b.l, &b.w, &b.h,
                    &b.yaw) != 8) {
      throw IoError(path + ": malformed row '" + line + "'");
    }
    out.push_back(b);
  }
  return out;
}

void write_dataset(const std::string& dir, const SceneSpec& base, int n, int jobs) {
  if (n < 0) throw ConfigError("gen: scene count must be >= 0");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create directory: " + ec.message());
  std::ostringstream manifest;
  manifest << "aopnet-dataset 1\nscenes " << n << "\n";
  for (int i = 0; i < n; ++i) manifest << scene_name(i) << ' ' << scene_seed(base.seed, i) << '\n';
  parallel_for(n, jobs, [&](int i) {
    SceneSpec spec = base;
    spec.seed = scene_seed(base.seed, i);
    const auto sample = generate_scene(spec);
    const std::string stem = dir + "/" + scene_name(i);
    write_point_cloud(stem + ".aopc", sample.points);
    write_labels(stem + ".labels", sample.labels);
    write_boxes_csv(stem + "_boxes.csv", sample.boxes);
  });
  write_file(dir + "/manifest.txt", manifest.str());
}

}  // namespace aop
