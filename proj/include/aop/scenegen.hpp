#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aop/detect.hpp"
#include "aop/geometry.hpp"

namespace aop {

enum class ShapeKind { Cuboid, Cylinder };

struct SceneSpec {
  std::uint64_t seed = 1;
  int cars = 2, pedestrians = 2, barriers = 1;
  RVSpec sensor;               ///< beam grid: one ray per RV pixel center
  double noise_sigma = 0.01;   ///< range noise, truncated at 3 sigma
  double ground_z = -1.8;
  double min_radius = 5.0, max_radius = 14.0;
  double wall_min = 17.0, wall_max = 22.0;  ///< distance of the four walls
  double wall_height = 3.0;
  int coarse_factor = 8;       ///< BEV factor of the detection grid
  GridSpec grid;
};

/// Semantic classes used by the generator.
inline constexpr int kGround = 0, kWall = 1, kCar = 2, kPedestrian = 3, kBarrier = 4;

struct SceneObject {
  Box3D box;  ///< cls is the detection class (thing index)
  ShapeKind shape = ShapeKind::Cuboid;
  int semantic = kCar;
};

struct SceneSample {
  PointCloud points;
  std::vector<PointLabel> labels;
  std::vector<Box3D> boxes;
  std::vector<SceneObject> objects;
  std::uint64_t used_seed = 0;  ///< seed of the attempt that succeeded
  int placement_retries = 0;
};

/// Ray-casts one beam per RV pixel center against the ground plane, four
/// walls and the placed objects. Deterministic in spec.seed.
SceneSample generate_scene(const SceneSpec& spec);

/// Seed of scene i in a dataset with base seed `base`.
std::uint64_t scene_seed(std::uint64_t base, int index);

std::string scene_name(int index);
void write_boxes_csv(const std::string& path, const std::vector<Box3D>& boxes);
std::vector<Box3D> read_boxes_csv(const std::string& path);

/// Writes scene_NNNN.aopc / .labels / _boxes.csv for n scenes and manifest.txt.
void write_dataset(const std::string& dir, const SceneSpec& base, int n, int jobs = 1);

}  // namespace aop
