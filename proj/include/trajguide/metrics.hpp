#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "trajguide/geometry.hpp"
#include "trajguide/model.hpp"

namespace trajguide {

enum class MaskSource { ground_truth, thresholded };

struct InstanceMask {
  std::size_t token = 0;
  CellSet pixels;
  MaskSource source = MaskSource::ground_truth;
};

struct DtlReport {
  double value = 0.0;
  std::vector<std::size_t> tokens;
  std::vector<double> per_instance;
};

/// Mask-averaged exp(-D) for one instance; 0 for an empty mask.
double dtl_instance(const InstanceMask& mask, const DistanceField& field);

/// Mean over instances of the mask-averaged exp(-D). `masks[i]` pairs with `fields[i]`.
double dtl(std::span<const InstanceMask> masks, std::span<const DistanceField> fields);
DtlReport dtl_report(std::span<const InstanceMask> masks, std::span<const DistanceField> fields);

enum class SegmentMode { ground_truth, threshold };

/// One mask per token. Threshold mode keeps the largest 4-connected component of
/// pixels labelled with the token at or above `threshold` intensity.
std::vector<InstanceMask> segment_blobs(const RenderedScene& scene, std::size_t token_count,
                                        SegmentMode mode = SegmentMode::ground_truth, double threshold = 0.6);

/// Trajectory distance field rasterized at image resolution, in latent-cell units.
DistanceField image_distance_field(const Trajectory& traj, GridDims latent, int factor);

/// DTL of a rendered scene against its trajectories (ground-truth masks, image resolution).
DtlReport evaluate_dtl(const RenderedScene& scene, std::span<const Trajectory> trajectories, GridDims latent,
                       int factor, SegmentMode mode = SegmentMode::ground_truth);

/// Same metric with masks reduced to the latent grid (a cell counts when its centre pixel is masked).
DtlReport evaluate_dtl_latent(const RenderedScene& scene, std::span<const Trajectory> trajectories, GridDims latent,
                              int factor);

}  // namespace trajguide
