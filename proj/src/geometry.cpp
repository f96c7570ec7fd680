#include "trajguide/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace trajguide {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Cell round_vertex(const Vertex& v, GridDims dims) {
  const auto r = static_cast<int>(std::lround(std::clamp(v.row, 0.0, static_cast<double>(dims.height - 1))));
  const auto c = static_cast<int>(std::lround(std::clamp(v.col, 0.0, static_cast<double>(dims.width - 1))));
  return {r, c};
}

void bresenham(Cell a, Cell b, std::vector<Cell>& out) {
  const int dr = std::abs(b.row - a.row);
  const int dc = std::abs(b.col - a.col);
  const int sr = a.row < b.row ? 1 : -1;
  const int sc = a.col < b.col ? 1 : -1;
  int err = dc - dr;
  Cell cur = a;
  for (;;) {
    out.push_back(cur);
    if (cur == b) break;
    const int e2 = 2 * err;
    if (e2 > -dr) {
      err -= dr;
      cur.col += sc;
    }
    if (e2 < dc) {
      err += dc;
      cur.row += sr;
    }
  }
}

// 1D squared-distance lower envelope. f holds squared distances (kInf where no source).
void lower_envelope(std::span<const double> f, std::span<double> d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double fq = f[q] + static_cast<double>(q) * q;
    double s = -kInf;
    while (k >= 0) {
      const int p = v[k];
      s = (fq - (f[p] + static_cast<double>(p) * p)) / (2.0 * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

}  // namespace

CellSet::CellSet(GridDims dims, std::vector<Cell> cells) : dims_(dims), cells_(std::move(cells)) {
  for (const Cell& c : cells_) {
    if (!dims_.contains(c.row, c.col)) throw GeometryError("cell outside grid");
  }
  std::sort(cells_.begin(), cells_.end());
  cells_.erase(std::unique(cells_.begin(), cells_.end()), cells_.end());
}

bool CellSet::contains(Cell c) const { return std::binary_search(cells_.begin(), cells_.end(), c); }

std::vector<unsigned char> CellSet::occupancy() const {
  std::vector<unsigned char> occ(dims_.size(), 0);
  for (const Cell& c : cells_) occ[dims_.index(c.row, c.col)] = 1;
  return occ;
}

void validate(const Trajectory& traj) {
  if (traj.polylines.empty()) throw GeometryError("empty trajectory");
  for (const Polyline& line : traj.polylines) {
    if (line.empty()) throw GeometryError("empty polyline");
    for (const Vertex& v : line) {
      if (!std::isfinite(v.row) || !std::isfinite(v.col)) throw GeometryError("non-finite vertex");
    }
  }
  if (!traj.enhancement_weights.empty()) {
    if (traj.enhancement_weights.size() != traj.polylines.size()) {
      throw GeometryError("weights must match polyline count");
    }
    for (double w : traj.enhancement_weights) {
      if (!(w > 0.0) || !std::isfinite(w)) throw GeometryError("enhancement weight must be positive");
    }
  }
}

Trajectory clamped(const Trajectory& traj, GridDims dims) {
  Trajectory out = traj;
  for (Polyline& line : out.polylines) {
    for (Vertex& v : line) {
      v.row = std::clamp(v.row, 0.0, static_cast<double>(dims.height - 1));
      v.col = std::clamp(v.col, 0.0, static_cast<double>(dims.width - 1));
    }
  }
  return out;
}

Trajectory scaled(const Trajectory& traj, int factor) {
  Trajectory out = traj;
  const double f = factor;
  for (Polyline& line : out.polylines) {
    for (Vertex& v : line) {
      v.row = (v.row + 0.5) * f - 0.5;
      v.col = (v.col + 0.5) * f - 0.5;
    }
  }
  return out;
}

CellSet rasterize_single(const Polyline& line, GridDims dims) {
  if (line.empty()) throw GeometryError("empty trajectory");
  if (dims.height < 2 || dims.width < 2) throw GeometryError("grid must be at least 2x2");
  std::vector<Cell> cells;
  Cell prev = round_vertex(line.front(), dims);
  cells.push_back(prev);
  for (std::size_t i = 1; i < line.size(); ++i) {
    const Cell next = round_vertex(line[i], dims);
    bresenham(prev, next, cells);
    prev = next;
  }
  return CellSet(dims, std::move(cells));
}

CellSet rasterize_polyline(const Trajectory& traj, GridDims dims) {
  validate(traj);
  std::vector<Cell> cells;
  for (const Polyline& line : traj.polylines) {
    const CellSet part = rasterize_single(line, dims);
    cells.insert(cells.end(), part.cells().begin(), part.cells().end());
  }
  return CellSet(dims, std::move(cells));
}

DistanceField distance_transform(const CellSet& src) {
  if (src.empty()) throw GeometryError("empty trajectory");
  const GridDims dims = src.dims();
  const auto h = static_cast<std::size_t>(dims.height);
  const auto w = static_cast<std::size_t>(dims.width);
  std::vector<double> sq(dims.size(), kInf);
  for (const Cell& c : src.cells()) sq[dims.index(c.row, c.col)] = 0.0;

  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> f(std::max(h, w));
  std::vector<double> d(std::max(h, w));

  // Columns first, then rows.
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) f[r] = sq[r * w + c];
    lower_envelope(std::span(f.data(), h), std::span(d.data(), h), v, z);
    for (std::size_t r = 0; r < h; ++r) sq[r * w + c] = d[r];
  }
  for (std::size_t r = 0; r < h; ++r) {
    std::copy_n(sq.begin() + static_cast<std::ptrdiff_t>(r * w), w, f.begin());
    lower_envelope(std::span(f.data(), w), std::span(d.data(), w), v, z);
    std::copy_n(d.begin(), w, sq.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  for (double& x : sq) x = std::sqrt(x);
  return {dims, std::move(sq)};
}

CellSet expand_trajectory_to_mask(const Trajectory& traj, GridDims dims, double radius) {
  if (!(radius >= 0.0)) throw GeometryError("radius must be non-negative");
  const CellSet raster = rasterize_polyline(traj, dims);
  const DistanceField field = distance_transform(raster);
  std::vector<Cell> cells;
  for (int r = 0; r < dims.height; ++r) {
    for (int c = 0; c < dims.width; ++c) {
      if (field.at(r, c) <= radius) cells.push_back({r, c});
    }
  }
  return CellSet(dims, std::move(cells));
}

DistanceField combined_distance_field(const Trajectory& traj, GridDims dims) {
  validate(traj);
  DistanceField out{dims, std::vector<double>(dims.size(), kInf)};
  for (std::size_t p = 0; p < traj.polylines.size(); ++p) {
    const DistanceField part = distance_transform(rasterize_single(traj.polylines[p], dims));
    const double w = traj.weight(p);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] = std::min(out.values[i], w == 1.0 ? part.values[i] : part.values[i] / w);
    }
  }
  return out;
}

DistanceField resample_bilinear(const DistanceField& field, GridDims target) {
  if (target == field.dims) return field;
  const GridDims src = field.dims;
  const double sy = static_cast<double>(src.height) / target.height;
  const double sx = static_cast<double>(src.width) / target.width;
  DistanceField out{target, std::vector<double>(target.size())};
  for (int r = 0; r < target.height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = y - y0;
    for (int c = 0; c < target.width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double fx = x - x0;
      const double top = field.at(y0, x0) * (1.0 - fx) + field.at(y0, x1) * fx;
      const double bottom = field.at(y1, x0) * (1.0 - fx) + field.at(y1, x1) * fx;
      out.values[target.index(r, c)] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

CellSet resample_region(const CellSet& region, GridDims target) {
  const GridDims src = region.dims();
  if (src == target) return region;
  const double fy = static_cast<double>(target.height) / src.height;
  const double fx = static_cast<double>(target.width) / src.width;
  std::vector<Cell> cells;
  for (const Cell& c : region.cells()) {
    const int r0 = static_cast<int>(std::floor(c.row * fy));
    const int r1 = static_cast<int>(std::ceil((c.row + 1) * fy)) - 1;
    const int c0 = static_cast<int>(std::floor(c.col * fx));
    const int c1 = static_cast<int>(std::ceil((c.col + 1) * fx)) - 1;
    for (int r = r0; r <= r1; ++r) {
      for (int q = c0; q <= c1; ++q) {
        if (target.contains(r, q)) cells.push_back({r, q});
      }
    }
  }
  return CellSet(target, std::move(cells));
}

Vertex bounding_box_center(const Trajectory& traj, GridDims dims) {
  validate(traj);
  double rmin = kInf, rmax = -kInf, cmin = kInf, cmax = -kInf;
  for (const Polyline& line : clamped(traj, dims).polylines) {
    for (const Vertex& v : line) {
      rmin = std::min(rmin, v.row);
      rmax = std::max(rmax, v.row);
      cmin = std::min(cmin, v.col);
      cmax = std::max(cmax, v.col);
    }
  }
  return {(rmin + rmax) / 2.0, (cmin + cmax) / 2.0};
}

}  // namespace trajguide
