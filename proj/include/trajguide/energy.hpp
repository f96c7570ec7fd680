#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "trajguide/geometry.hpp"
#include "trajguide/model.hpp"

namespace trajguide {

class EnergyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnergyConfig {
  double lambda = 10.0;
  /// Offset in the inverse-distance weight (D + epsilon)^-1.
  double epsilon = 1.0;
  /// Lower clamp on sum(A) checks and on the movement denominator sum(D * A).
  double denom_floor = 1e-8;
};

struct EnergyTerm {
  std::size_t layer = 0;
  std::size_t token = 0;
  double e_control = 0.0;
  double e_movement = 0.0;
  double e_total = 0.0;
};

struct EnergyBreakdown {
  double e_control = 0.0;
  double e_movement = 0.0;
  double e_total = 0.0;
  std::vector<EnergyTerm> terms;
};

/// Inclusive cell rectangle.
struct Box {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;
};

/// (1 - sum (D+eps)^-1 A / sum A)^2
double control_energy(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg);
/// (1 - sum A / max(sum D A, floor))^2
double movement_energy(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg);
/// (1 - sum_{region} A / sum A)^2
double region_energy(std::span<const double> a_col, const CellSet& region);
double box_energy(std::span<const double> a_col, GridDims dims, const Box& box);

/// Gradients of the single-column energies, written into `out`.
void control_energy_grad(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg,
                         std::span<double> out);
void movement_energy_grad(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg,
                          std::span<double> out);
void region_energy_grad(std::span<const double> a_col, const CellSet& region, std::span<double> out);

/// Thresholds a column at `threshold * max`, then shifts the surviving cells so their
/// centroid lands on the trajectory's bounding-box centre. Throws EnergyError("unusable mask")
/// when nothing survives.
CellSet prior_structure_mask(std::span<const double> a_col, GridDims dims, double threshold, const Trajectory& traj);

/// Distance fields of one constrained token, one per attention layer at that layer's resolution.
struct TokenFields {
  std::size_t token = 0;
  std::vector<DistanceField> per_layer;
};

/// Guidance regions of one constrained token, one per attention layer.
struct TokenRegions {
  std::size_t token = 0;
  std::vector<CellSet> per_layer;
};

EnergyBreakdown total_energy(std::span<const AttentionMap> attn, std::span<const TokenFields> fields,
                             std::span<const std::size_t> layers, const EnergyConfig& cfg);

/// dE/dA for every layer (zero outside the selected layers and constrained columns).
std::vector<AttentionMap> energy_grad_wrt_attention(std::span<const AttentionMap> attn,
                                                    std::span<const TokenFields> fields,
                                                    std::span<const std::size_t> layers, const EnergyConfig& cfg);

/// Region (mask/box) baseline: e_control carries the region term, e_movement stays 0.
EnergyBreakdown region_total_energy(std::span<const AttentionMap> attn, std::span<const TokenRegions> regions,
                                    std::span<const std::size_t> layers);
std::vector<AttentionMap> region_energy_grad_wrt_attention(std::span<const AttentionMap> attn,
                                                           std::span<const TokenRegions> regions,
                                                           std::span<const std::size_t> layers);

}  // namespace trajguide
