#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trajguide/geometry.hpp"

namespace trajguide {

/// A prompt with trajectories bound to some of its tokens.
struct Scene {
  std::string name;
  std::vector<int> prompt;
  std::vector<Trajectory> trajectories;
  /// Added to the run seed so every scene draws its own initial noise.
  std::uint64_t seed_offset = 0;
};

/// Two-object scene used by `demo` and the service examples.
Scene demo_scene();

/// Seeded random scenes: 2-4 tokens, one or two trajectories (straight strokes,
/// bent strokes and the occasional enhanced stroke), at least one free token.
std::vector<Scene> make_scene_suite(int count, std::uint64_t suite_seed, GridDims grid);

}  // namespace trajguide
