#include "trajguide/scene.hpp"

#include <algorithm>
#include <cmath>

#include "trajguide/rng.hpp"

namespace trajguide {

namespace {

constexpr int kVocabulary = 4096;

Vertex random_vertex(Rng& rng, GridDims grid, int margin) {
  return {static_cast<double>(rng.uniform_int(margin, grid.height - 1 - margin)),
          static_cast<double>(rng.uniform_int(margin, grid.width - 1 - margin))};
}

// A stroke of length [min_len, max_len] cells starting inside the margin.
Polyline random_stroke(Rng& rng, GridDims grid, int vertices) {
  const int margin = 1;
  const double min_len = std::min(grid.height, grid.width) * 0.3;
  const double max_len = std::min(grid.height, grid.width) * 0.7;
  Polyline line{random_vertex(rng, grid, margin)};
  double heading = rng.uniform(0.0, 2.0 * M_PI);
  for (int v = 1; v < vertices; ++v) {
    const double seg = rng.uniform(min_len, max_len) / (vertices - 1);
    for (int attempt = 0; attempt < 32; ++attempt) {
      const Vertex& last = line.back();
      const Vertex next{std::round(last.row + seg * std::sin(heading)), std::round(last.col + seg * std::cos(heading))};
      if (next.row >= margin && next.row <= grid.height - 1 - margin && next.col >= margin &&
          next.col <= grid.width - 1 - margin) {
        line.push_back(next);
        break;
      }
      heading = rng.uniform(0.0, 2.0 * M_PI);
    }
    heading += rng.uniform(-1.2, 1.2);
  }
  return line;
}

}  // namespace

Scene demo_scene() {
  Scene s;
  s.name = "demo";
  s.prompt = {17, 2048, 911};
  s.trajectories.push_back({1, {{{4.0, 3.0}, {6.0, 7.0}, {11.0, 9.0}}}, {}});
  s.trajectories.push_back({2, {{{3.0, 12.0}, {12.0, 13.0}}}, {}});
  return s;
}

std::vector<Scene> make_scene_suite(int count, std::uint64_t suite_seed, GridDims grid) {
  std::vector<Scene> scenes;
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(suite_seed, static_cast<std::uint64_t>(i)));
    Scene s;
    s.name = "scene_" + std::to_string(i);
    s.seed_offset = static_cast<std::uint64_t>(i);
    const int m = rng.uniform_int(2, 4);
    for (int k = 0; k < m; ++k) s.prompt.push_back(rng.uniform_int(1, kVocabulary - 1));
    const int n = rng.uniform_int(1, std::min(2, m - 1));
    std::vector<std::size_t> slots(static_cast<std::size_t>(m));
    for (std::size_t k = 0; k < slots.size(); ++k) slots[k] = k;
    for (std::size_t k = slots.size(); k > 1; --k) std::swap(slots[k - 1], slots[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(k) - 1))]);
    for (int k = 0; k < n; ++k) {
      Trajectory t;
      t.token_index = slots[static_cast<std::size_t>(k)];
      const double kind = rng.uniform();
      if (kind < 0.55) {
        t.polylines.push_back(random_stroke(rng, grid, 2));
      } else if (kind < 0.9) {
        t.polylines.push_back(random_stroke(rng, grid, 3));
      } else {
        // Bent stroke whose second leg is enhanced.
        const Polyline bent = random_stroke(rng, grid, 3);
        t.polylines.push_back({bent[0], bent[1]});
        t.polylines.push_back({bent[1], bent.back()});
        t.enhancement_weights = {1.0, 2.0};
      }
      s.trajectories.push_back(std::move(t));
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace trajguide
