#pragma once

#include "aop/config.hpp"
#include "aop/model.hpp"
#include "aop/train.hpp"

namespace aop::testing {

/// Thin-width configuration that runs a full forward pass in milliseconds.
inline RunConfig tiny_config() {
  RunConfig c;
  c.grid.H = 64;
  c.grid.W = 64;
  c.grid.Z = 16;
  c.rv.height = 16;
  c.rv.width = 128;
  c.c0 = 4;
  c.c1 = 6;
  c.c2 = 8;
  c.pan_widths = {4, 6, 6};
  c.sc_width1 = 8;
  c.sc_width2 = 8;
  c.sc_n0 = 1;
  c.sc_n1 = 1;
  c.sc_n2 = 1;
  c.code_width = 4;
  c.k_s1 = 4;
  c.k_s2 = 6;
  c.det_trunk = 8;
  c.steps = 4;
  c.teacher_forcing_steps = 2;
  c.scenes = 2;
  return c;
}

inline SceneSample tiny_scene(const RunConfig& cfg, std::uint64_t seed) {
  auto spec = scene_spec(cfg);
  spec.seed = seed;
  return generate_scene(spec);
}

inline SceneInput tiny_input(const RunConfig& cfg, std::uint64_t seed) {
  const auto s = tiny_scene(cfg, seed);
  return prepare_scene(s.points, cfg, &s.labels, &s.boxes);
}

}  // namespace aop::testing
