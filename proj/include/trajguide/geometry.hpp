#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajguide {

/// Raised for invalid geometric input (empty trajectories, bad weights, ...).
class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GridDims {
  int height = 0;
  int width = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  [[nodiscard]] bool contains(int row, int col) const { return row >= 0 && row < height && col >= 0 && col < width; }
  [[nodiscard]] std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width) + static_cast<std::size_t>(col);
  }
  auto operator<=>(const GridDims&) const = default;
};

struct Cell {
  int row = 0;
  int col = 0;
  auto operator<=>(const Cell&) const = default;
};

/// A sorted, duplicate-free set of grid cells.
class CellSet {
 public:
  CellSet() = default;
  CellSet(GridDims dims, std::vector<Cell> cells);

  [[nodiscard]] GridDims dims() const { return dims_; }
  [[nodiscard]] const std::vector<Cell>& cells() const { return cells_; }
  [[nodiscard]] std::size_t size() const { return cells_.size(); }
  [[nodiscard]] bool empty() const { return cells_.empty(); }
  [[nodiscard]] bool contains(Cell c) const;
  /// Row-major 0/1 occupancy mask.
  [[nodiscard]] std::vector<unsigned char> occupancy() const;

  bool operator==(const CellSet&) const = default;

 private:
  GridDims dims_;
  std::vector<Cell> cells_;
};

/// Euclidean distance (in grid cells) from each cell to a source set.
struct DistanceField {
  GridDims dims;
  std::vector<double> values;

  [[nodiscard]] double at(int row, int col) const { return values[dims.index(row, col)]; }
};

struct Vertex {
  double row = 0.0;
  double col = 0.0;
  bool operator==(const Vertex&) const = default;
};

using Polyline = std::vector<Vertex>;

/// A user stroke set bound to one prompt token.
struct Trajectory {
  std::size_t token_index = 0;
  std::vector<Polyline> polylines;
  /// One weight per polyline; empty means all 1.0.
  std::vector<double> enhancement_weights;

  [[nodiscard]] double weight(std::size_t polyline) const {
    return enhancement_weights.empty() ? 1.0 : enhancement_weights[polyline];
  }
  bool operator==(const Trajectory&) const = default;
};

/// Throws GeometryError if the trajectory has no polylines, an empty polyline,
/// a non-finite vertex, or a non-positive / mismatched weight list.
void validate(const Trajectory& traj);

/// Clamp every vertex into [0, H-1] x [0, W-1].
Trajectory clamped(const Trajectory& traj, GridDims dims);

/// Maps grid coordinates onto a finer raster `factor` times larger, keeping cell centres aligned.
Trajectory scaled(const Trajectory& traj, int factor);

/// Cells on the Bresenham segments between consecutive rounded vertices, unioned over polylines.
CellSet rasterize_polyline(const Trajectory& traj, GridDims dims);
CellSet rasterize_single(const Polyline& line, GridDims dims);

/// Exact Euclidean distance transform (two separable passes over squared distances).
DistanceField distance_transform(const CellSet& src);

/// Cells whose distance to the rasterized trajectory is at most `radius`.
CellSet expand_trajectory_to_mask(const Trajectory& traj, GridDims dims, double radius);

/// Pointwise min over polylines of distance / enhancement weight.
DistanceField combined_distance_field(const Trajectory& traj, GridDims dims);

/// Bilinear resampling with cell-centre alignment and edge clamping.
DistanceField resample_bilinear(const DistanceField& field, GridDims target);

/// Region membership carried onto another resolution: a target cell is kept when it overlaps any source cell.
CellSet resample_region(const CellSet& region, GridDims target);

/// Centre of the axis-aligned bounding box of the clamped vertices.
Vertex bounding_box_center(const Trajectory& traj, GridDims dims);

}  // namespace trajguide
