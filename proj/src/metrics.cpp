#include "trajguide/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace trajguide {

double dtl_instance(const InstanceMask& mask, const DistanceField& field) {
  if (mask.pixels.empty()) return 0.0;
  if (mask.pixels.dims() != field.dims) throw ShapeError("mask and distance field differ in resolution");
  double sum = 0.0;
  for (const Cell& c : mask.pixels.cells()) sum += std::exp(-field.at(c.row, c.col));
  return sum / static_cast<double>(mask.pixels.size());
}

DtlReport dtl_report(std::span<const InstanceMask> masks, std::span<const DistanceField> fields) {
  if (masks.size() != fields.size()) throw std::invalid_argument("every mask needs a distance field");
  DtlReport out;
  if (masks.empty()) return out;
  double total = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const double v = dtl_instance(masks[i], fields[i]);
    out.tokens.push_back(masks[i].token);
    out.per_instance.push_back(v);
    total += v;
  }
  out.value = total / static_cast<double>(masks.size());
  return out;
}

double dtl(std::span<const InstanceMask> masks, std::span<const DistanceField> fields) {
  return dtl_report(masks, fields).value;
}

std::vector<InstanceMask> segment_blobs(const RenderedScene& scene, std::size_t token_count, SegmentMode mode,
                                        double threshold) {
  std::vector<InstanceMask> out;
  if (mode == SegmentMode::ground_truth) {
    for (const GroundTruthMask& m : scene.masks) {
      if (m.token < token_count) out.push_back({m.token, m.pixels, MaskSource::ground_truth});
    }
    return out;
  }

  const Image& img = scene.image;
  const GridDims dims{img.height, img.width};
  std::vector<int> component(dims.size(), -1);
  for (std::size_t token = 0; token < token_count; ++token) {
    auto wanted = [&](std::size_t idx) {
      return img.labels[idx] == static_cast<int>(token) && img.intensity[idx] >= threshold;
    };
    std::vector<Cell> best;
    std::fill(component.begin(), component.end(), -1);
    int label = 0;
    for (int r = 0; r < dims.height; ++r) {
      for (int c = 0; c < dims.width; ++c) {
        const std::size_t seed = dims.index(r, c);
        if (!wanted(seed) || component[seed] >= 0) continue;
        std::vector<Cell> cells;
        std::vector<Cell> stack{{r, c}};
        component[seed] = label;
        while (!stack.empty()) {
          const Cell cur = stack.back();
          stack.pop_back();
          cells.push_back(cur);
          const Cell next[4] = {{cur.row - 1, cur.col}, {cur.row + 1, cur.col}, {cur.row, cur.col - 1}, {cur.row, cur.col + 1}};
          for (const Cell& n : next) {
            if (!dims.contains(n.row, n.col)) continue;
            const std::size_t idx = dims.index(n.row, n.col);
            if (component[idx] < 0 && wanted(idx)) {
              component[idx] = label;
              stack.push_back(n);
            }
          }
        }
        if (cells.size() > best.size()) best = std::move(cells);
        ++label;
      }
    }
    out.push_back({token, CellSet(dims, std::move(best)), MaskSource::thresholded});
  }
  return out;
}

DistanceField image_distance_field(const Trajectory& traj, GridDims latent, int factor) {
  const GridDims img{latent.height * factor, latent.width * factor};
  DistanceField field = combined_distance_field(scaled(clamped(traj, latent), factor), img);
  for (double& v : field.values) v /= factor;
  return field;
}

namespace {

std::vector<InstanceMask> masks_for(const RenderedScene& scene, std::span<const Trajectory> trajectories,
                                    SegmentMode mode) {
  std::size_t token_count = 0;
  for (const Trajectory& t : trajectories) token_count = std::max(token_count, t.token_index + 1);
  token_count = std::max(token_count, scene.masks.size());
  const std::vector<InstanceMask> all = segment_blobs(scene, token_count, mode);
  std::vector<InstanceMask> out;
  for (const Trajectory& t : trajectories) {
    auto it = std::find_if(all.begin(), all.end(), [&](const InstanceMask& m) { return m.token == t.token_index; });
    if (it == all.end()) throw std::invalid_argument("trajectory references a token with no rendered blob");
    out.push_back(*it);
  }
  return out;
}

}  // namespace

DtlReport evaluate_dtl(const RenderedScene& scene, std::span<const Trajectory> trajectories, GridDims latent,
                       int factor, SegmentMode mode) {
  const std::vector<InstanceMask> masks = masks_for(scene, trajectories, mode);
  std::vector<DistanceField> fields;
  for (const Trajectory& t : trajectories) fields.push_back(image_distance_field(t, latent, factor));
  return dtl_report(masks, fields);
}

DtlReport evaluate_dtl_latent(const RenderedScene& scene, std::span<const Trajectory> trajectories, GridDims latent,
                              int factor) {
  const std::vector<InstanceMask> image_masks = masks_for(scene, trajectories, SegmentMode::ground_truth);
  std::vector<InstanceMask> masks;
  std::vector<DistanceField> fields;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    std::vector<Cell> cells;
    for (int r = 0; r < latent.height; ++r) {
      for (int c = 0; c < latent.width; ++c) {
        if (image_masks[i].pixels.contains({r * factor + factor / 2, c * factor + factor / 2})) cells.push_back({r, c});
      }
    }
    masks.push_back({image_masks[i].token, CellSet(latent, std::move(cells)), MaskSource::ground_truth});
    fields.push_back(combined_distance_field(clamped(trajectories[i], latent), latent));
  }
  return dtl_report(masks, fields);
}

}  // namespace trajguide
