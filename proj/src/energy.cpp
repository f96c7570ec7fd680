#include "trajguide/energy.hpp"

#include <algorithm>
#include <cmath>

namespace trajguide {

namespace {

double column_mass(std::span<const double> a_col, double floor) {
  double s = 0.0;
  for (double a : a_col) s += a;
  if (!(s >= floor)) throw EnergyError("degenerate attention");
  return s;
}

void check_sizes(std::span<const double> a_col, std::span<const double> dist) {
  if (a_col.size() != dist.size()) throw ShapeError("attention column and distance field differ in size");
}

struct ControlParts {
  double mass;
  double ratio;
};

ControlParts control_parts(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg) {
  check_sizes(a_col, dist);
  const double mass = column_mass(a_col, cfg.denom_floor);
  double weighted = 0.0;
  for (std::size_t k = 0; k < a_col.size(); ++k) weighted += a_col[k] / (dist[k] + cfg.epsilon);
  return {mass, weighted / mass};
}

struct MovementParts {
  double mass;
  double spread;  // sum D*A before clamping
  double denom;
};

MovementParts movement_parts(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg) {
  check_sizes(a_col, dist);
  const double mass = column_mass(a_col, cfg.denom_floor);
  double spread = 0.0;
  for (std::size_t k = 0; k < a_col.size(); ++k) spread += dist[k] * a_col[k];
  return {mass, spread, std::max(spread, cfg.denom_floor)};
}

double region_fraction(std::span<const double> a_col, const CellSet& region, double* mass_out) {
  if (region.empty()) throw EnergyError("empty region");
  if (region.dims().size() != a_col.size()) throw ShapeError("region and attention column differ in size");
  const double mass = column_mass(a_col, 1e-8);
  double inside = 0.0;
  for (const Cell& c : region.cells()) inside += a_col[region.dims().index(c.row, c.col)];
  if (mass_out != nullptr) *mass_out = mass;
  return inside / mass;
}

void check_layers(std::span<const AttentionMap> attn, std::span<const std::size_t> layers) {
  for (std::size_t l : layers) {
    if (l >= attn.size()) throw EnergyError("layer not available");
  }
}

template <typename Target>
void check_target(std::span<const AttentionMap> attn, const Target& target, std::size_t layer) {
  if (attn.empty() || target.token >= attn[layer].tokens) throw EnergyError("token index out of range");
  if (layer >= target.per_layer.size()) throw EnergyError("unconstrained token referenced");
}

}  // namespace

double control_energy(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg) {
  const auto [mass, ratio] = control_parts(a_col, dist, cfg);
  return (1.0 - ratio) * (1.0 - ratio);
}

double movement_energy(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg) {
  const MovementParts p = movement_parts(a_col, dist, cfg);
  const double q = p.mass / p.denom;
  return (1.0 - q) * (1.0 - q);
}

double region_energy(std::span<const double> a_col, const CellSet& region) {
  const double frac = region_fraction(a_col, region, nullptr);
  return (1.0 - frac) * (1.0 - frac);
}

double box_energy(std::span<const double> a_col, GridDims dims, const Box& box) {
  if (box.row0 > box.row1 || box.col0 > box.col1) throw EnergyError("empty box");
  if (!dims.contains(box.row0, box.col0) || !dims.contains(box.row1, box.col1)) {
    throw EnergyError("box outside grid");
  }
  std::vector<Cell> cells;
  for (int r = box.row0; r <= box.row1; ++r) {
    for (int c = box.col0; c <= box.col1; ++c) cells.push_back({r, c});
  }
  return region_energy(a_col, CellSet(dims, std::move(cells)));
}

void control_energy_grad(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg,
                         std::span<double> out) {
  const auto [mass, ratio] = control_parts(a_col, dist, cfg);
  const double outer = -2.0 * (1.0 - ratio) / mass;
  for (std::size_t k = 0; k < a_col.size(); ++k) {
    out[k] = outer * (1.0 / (dist[k] + cfg.epsilon) - ratio);
  }
}

void movement_energy_grad(std::span<const double> a_col, std::span<const double> dist, const EnergyConfig& cfg,
                          std::span<double> out) {
  const MovementParts p = movement_parts(a_col, dist, cfg);
  const double q = p.mass / p.denom;
  const double outer = -2.0 * (1.0 - q);
  const bool clamped = p.spread < cfg.denom_floor;
  for (std::size_t k = 0; k < a_col.size(); ++k) {
    double dq = 1.0 / p.denom;
    if (!clamped) dq -= p.mass * dist[k] / (p.denom * p.denom);
    out[k] = outer * dq;
  }
}

void region_energy_grad(std::span<const double> a_col, const CellSet& region, std::span<double> out) {
  double mass = 0.0;
  const double frac = region_fraction(a_col, region, &mass);
  const double outer = -2.0 * (1.0 - frac) / mass;
  // d frac / dA_k = ([k in region] - frac) / mass
  std::fill(out.begin(), out.end(), outer * (-frac));
  for (const Cell& c : region.cells()) out[region.dims().index(c.row, c.col)] = outer * (1.0 - frac);
}

CellSet prior_structure_mask(std::span<const double> a_col, GridDims dims, double threshold, const Trajectory& traj) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw EnergyError("threshold must lie in (0, 1)");
  if (a_col.size() != dims.size()) throw ShapeError("attention column does not match grid");
  const double peak = *std::max_element(a_col.begin(), a_col.end());
  std::vector<Cell> kept;
  double cr = 0.0, cc = 0.0;
  for (int r = 0; r < dims.height; ++r) {
    for (int c = 0; c < dims.width; ++c) {
      if (a_col[dims.index(r, c)] >= threshold * peak) {
        kept.push_back({r, c});
        cr += r;
        cc += c;
      }
    }
  }
  if (kept.empty()) throw EnergyError("unusable mask");
  cr /= static_cast<double>(kept.size());
  cc /= static_cast<double>(kept.size());
  const Vertex target = bounding_box_center(traj, dims);
  const auto dr = static_cast<int>(std::lround(target.row - cr));
  const auto dc = static_cast<int>(std::lround(target.col - cc));
  std::vector<Cell> moved;
  for (const Cell& c : kept) {
    const Cell t{c.row + dr, c.col + dc};
    if (dims.contains(t.row, t.col)) moved.push_back(t);
  }
  if (moved.empty()) throw EnergyError("unusable mask");
  return CellSet(dims, std::move(moved));
}

EnergyBreakdown total_energy(std::span<const AttentionMap> attn, std::span<const TokenFields> fields,
                             std::span<const std::size_t> layers, const EnergyConfig& cfg) {
  check_layers(attn, layers);
  EnergyBreakdown out;
  for (std::size_t l : layers) {
    for (const TokenFields& tf : fields) {
      check_target(attn, tf, l);
      const DistanceField& d = tf.per_layer[l];
      if (d.dims != attn[l].dims) throw ShapeError("distance field does not match layer resolution");
      const std::vector<double> col = attn[l].column(tf.token);
      EnergyTerm term{l, tf.token, control_energy(col, d.values, cfg), movement_energy(col, d.values, cfg), 0.0};
      term.e_total = term.e_control + cfg.lambda * term.e_movement;
      out.e_control += term.e_control;
      out.e_movement += term.e_movement;
      out.e_total += term.e_total;
      out.terms.push_back(term);
    }
  }
  return out;
}

std::vector<AttentionMap> energy_grad_wrt_attention(std::span<const AttentionMap> attn,
                                                    std::span<const TokenFields> fields,
                                                    std::span<const std::size_t> layers, const EnergyConfig& cfg) {
  check_layers(attn, layers);
  std::vector<AttentionMap> grads;
  for (const AttentionMap& a : attn) grads.emplace_back(a.layer, a.dims, a.tokens);
  for (std::size_t l : layers) {
    for (const TokenFields& tf : fields) {
      check_target(attn, tf, l);
      const DistanceField& d = tf.per_layer[l];
      if (d.dims != attn[l].dims) throw ShapeError("distance field does not match layer resolution");
      const std::vector<double> col = attn[l].column(tf.token);
      std::vector<double> gc(col.size());
      std::vector<double> gm(col.size());
      control_energy_grad(col, d.values, cfg, gc);
      if (cfg.lambda != 0.0) movement_energy_grad(col, d.values, cfg, gm);
      for (std::size_t loc = 0; loc < col.size(); ++loc) {
        grads[l].at(loc, tf.token) += gc[loc] + cfg.lambda * gm[loc];
      }
    }
  }
  return grads;
}

EnergyBreakdown region_total_energy(std::span<const AttentionMap> attn, std::span<const TokenRegions> regions,
                                    std::span<const std::size_t> layers) {
  check_layers(attn, layers);
  EnergyBreakdown out;
  for (std::size_t l : layers) {
    for (const TokenRegions& tr : regions) {
      check_target(attn, tr, l);
      const double e = region_energy(attn[l].column(tr.token), tr.per_layer[l]);
      out.e_control += e;
      out.e_total += e;
      out.terms.push_back({l, tr.token, e, 0.0, e});
    }
  }
  return out;
}

std::vector<AttentionMap> region_energy_grad_wrt_attention(std::span<const AttentionMap> attn,
                                                           std::span<const TokenRegions> regions,
                                                           std::span<const std::size_t> layers) {
  check_layers(attn, layers);
  std::vector<AttentionMap> grads;
  for (const AttentionMap& a : attn) grads.emplace_back(a.layer, a.dims, a.tokens);
  for (std::size_t l : layers) {
    for (const TokenRegions& tr : regions) {
      check_target(attn, tr, l);
      const std::vector<double> col = attn[l].column(tr.token);
      std::vector<double> g(col.size());
      region_energy_grad(col, tr.per_layer[l], g);
      for (std::size_t loc = 0; loc < col.size(); ++loc) grads[l].at(loc, tr.token) += g[loc];
    }
  }
  return grads;
}

}  // namespace trajguide
