#include <cmath>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "trajguide/energy.hpp"

using namespace trajguide;

namespace {

const std::vector<double> kD{0.0, 1.0, 3.0};
const std::vector<double> kA{0.5, 0.3, 0.2};

AttentionMap single_column(const std::vector<double>& col, GridDims dims) {
  AttentionMap a(0, dims, 1);
  a.values = col;
  return a;
}

TokenFields field_for(std::size_t token, const std::vector<double>& d, GridDims dims, std::size_t layers = 1) {
  return {token, std::vector<DistanceField>(layers, DistanceField{dims, d})};
}

const std::vector<std::size_t> kLayer0{0};

}  // namespace

TEST_CASE("control energy: hand values") {
  const EnergyConfig cfg;
  CHECK(control_energy(kA, kD, cfg) == doctest::Approx(0.09).epsilon(1e-12));
  // All mass on zero-distance cells.
  CHECK(control_energy(std::vector<double>{0.6, 0.4, 0.0}, std::vector<double>{0.0, 0.0, 5.0}, cfg) == 0.0);
  // Uniform mass, every D >= 9: bounded below by (1 - 1/10)^2.
  const std::vector<double> far{9.0, 11.0, 14.0, 30.0};
  CHECK(control_energy(std::vector<double>(4, 0.25), far, cfg) >= 0.81);
}

TEST_CASE("movement energy: hand values and clamp") {
  const EnergyConfig cfg;
  CHECK(movement_energy(kA, kD, cfg) == doctest::Approx(std::pow(1.0 - 1.0 / 0.9, 2)).epsilon(1e-12));
  CHECK(movement_energy(kA, kD, cfg) == doctest::Approx(0.0123457).epsilon(1e-6));
  CHECK(movement_energy(std::vector<double>{0.0, 0.7, 0.0}, kD, cfg) == 0.0);
  const double clamped = movement_energy(std::vector<double>{1.0, 0.0, 0.0}, kD, cfg);
  CHECK(std::isfinite(clamped));
  CHECK(clamped > 1e15);
}

TEST_CASE("degenerate attention is rejected") {
  const EnergyConfig cfg;
  const std::vector<double> zero(3, 0.0);
  CHECK_THROWS_WITH_AS(control_energy(zero, kD, cfg), "degenerate attention", EnergyError);
  CHECK_THROWS_WITH_AS(movement_energy(zero, kD, cfg), "degenerate attention", EnergyError);
}

TEST_CASE("total energy: composition, lambda 0, additivity") {
  const GridDims dims{1, 3};
  const std::vector<AttentionMap> attn{single_column(kA, dims)};
  const std::vector<TokenFields> fields{field_for(0, kD, dims)};
  EnergyConfig cfg;
  const EnergyBreakdown e = total_energy(attn, fields, kLayer0, cfg);
  CHECK(e.e_total == doctest::Approx(0.2134568).epsilon(1e-7));
  CHECK(e.e_total == doctest::Approx(0.09 + 10.0 * std::pow(1.0 - 1.0 / 0.9, 2)).epsilon(1e-12));
  CHECK(std::abs(e.e_total - (e.e_control + cfg.lambda * e.e_movement)) <= 1e-12);
  REQUIRE(e.terms.size() == 1);
  CHECK(e.terms[0].e_total == doctest::Approx(control_energy(kA, kD, cfg) + 10.0 * movement_energy(kA, kD, cfg)));

  cfg.lambda = 0.0;
  const EnergyBreakdown e0 = total_energy(attn, fields, kLayer0, cfg);
  CHECK(e0.e_total == e0.e_control);
}

TEST_CASE("total energy: additivity on random instances") {
  std::mt19937_64 gen(9);
  for (int i = 0; i < 50; ++i) {
    const GridDims dims{6, 5};
    std::vector<AttentionMap> attn{testing::random_attention(gen, 0, dims, 3), testing::random_attention(gen, 1, dims, 3)};
    std::vector<double> d(dims.size());
    std::uniform_real_distribution<double> u(0.0, 6.0);
    for (double& v : d) v = u(gen);
    const std::vector<TokenFields> fields{field_for(1, d, dims, 2)};
    const std::vector<std::size_t> layers{0, 1};
    const EnergyConfig cfg{u(gen) * 10.0, 1.0, 1e-8};
    const EnergyBreakdown e = total_energy(attn, fields, layers, cfg);
    CHECK(std::abs(e.e_total - (e.e_control + cfg.lambda * e.e_movement)) <= 1e-12);
    for (const EnergyTerm& t : e.terms) CHECK(std::abs(t.e_total - (t.e_control + cfg.lambda * t.e_movement)) <= 1e-12);
  }
}

TEST_CASE("total energy: error cases") {
  const GridDims dims{1, 3};
  const std::vector<AttentionMap> attn{single_column(kA, dims)};
  const EnergyConfig cfg;
  const std::vector<TokenFields> beyond{field_for(1, kD, dims)};
  CHECK_THROWS_WITH_AS(total_energy(attn, beyond, kLayer0, cfg), "token index out of range", EnergyError);
  const std::vector<TokenFields> missing_layer{{0, {}}};
  CHECK_THROWS_WITH_AS(total_energy(attn, missing_layer, kLayer0, cfg), "unconstrained token referenced", EnergyError);
  const std::vector<TokenFields> ok{field_for(0, kD, dims)};
  const std::vector<std::size_t> layer3{3};
  CHECK_THROWS_WITH_AS(total_energy(attn, ok, layer3, cfg), "layer not available", EnergyError);
  const std::vector<TokenFields> wrong_dims{field_for(0, kD, {3, 1})};
  CHECK_THROWS_AS(total_energy(attn, wrong_dims, kLayer0, cfg), ShapeError);
}

TEST_CASE("E_c = 0 iff all attention sits on the trajectory (epsilon 1)") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  const EnergyConfig cfg;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> d(20), a(20);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = (k % 3 == 0) ? 0.0 : 1.0 + 5.0 * u(gen);
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = d[k] == 0.0 ? u(gen) : 0.0;
    CHECK(control_energy(a, d, cfg) <= 1e-9);
    a[1 + static_cast<std::size_t>(i % 6) * 3] = 0.05 + 0.1 * u(gen);
    CHECK(control_energy(a, d, cfg) > 1e-6);
  }
}

TEST_CASE("scale invariance of control, movement and box energies") {
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const EnergyConfig cfg;
  const GridDims dims{4, 5};
  const Box box{1, 1, 2, 3};
  for (int i = 0; i < 100; ++i) {
    std::vector<double> a(dims.size()), d(dims.size());
    for (double& v : a) v = 0.01 + u(gen);
    for (double& v : d) v = 4.0 * u(gen);
    const double c = std::pow(10.0, 4.0 * u(gen) - 2.0);
    std::vector<double> ca = a;
    for (double& v : ca) v *= c;
    CHECK(control_energy(ca, d, cfg) == doctest::Approx(control_energy(a, d, cfg)).epsilon(1e-12));
    CHECK(movement_energy(ca, d, cfg) == doctest::Approx(movement_energy(a, d, cfg)).epsilon(1e-12));
    CHECK(box_energy(ca, dims, box) == doctest::Approx(box_energy(a, dims, box)).epsilon(1e-12));
  }
}

TEST_CASE("mass transport towards the trajectory never increases E_c") {
  std::mt19937_64 gen(1000);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, 24);
  const EnergyConfig cfg;
  int moves = 0, movement_checks = 0;
  while (moves < 1000) {
    std::vector<double> a(25), d(25);
    for (double& v : a) v = 0.01 + u(gen);
    for (double& v : d) v = std::floor(6.0 * u(gen));
    const std::size_t from = pick(gen), to = pick(gen);
    if (!(d[to] < d[from])) continue;
    std::vector<double> b = a;
    const double delta = a[from] * u(gen);
    b[from] -= delta;
    b[to] += delta;
    REQUIRE(control_energy(b, d, cfg) <= control_energy(a, d, cfg) + 1e-14);
    double sa = 0.0, sda = 0.0, sdb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      sa += a[k];
      sda += d[k] * a[k];
      sdb += d[k] * b[k];
    }
    if (sda > sa && sdb >= sa) {
      REQUIRE(movement_energy(b, d, cfg) <= movement_energy(a, d, cfg) + 1e-14);
      ++movement_checks;
    }
    ++moves;
  }
  CHECK(movement_checks > 100);
}

TEST_CASE("box energy: hand values and errors") {
  const GridDims dims{2, 2};
  CHECK(box_energy(std::vector<double>{0.5, 0.5, 0.0, 0.0}, dims, {0, 0, 0, 1}) == 0.0);
  CHECK(box_energy(std::vector<double>{0.5, 0.25, 0.1, 0.15}, dims, {0, 0, 0, 1}) == doctest::Approx(0.0625).epsilon(1e-12));
  CHECK(box_energy(std::vector<double>{0.1, 0.2, 0.3, 0.4}, dims, {0, 0, 1, 1}) == 0.0);
  CHECK_THROWS_WITH_AS(box_energy(std::vector<double>{0.1, 0.2, 0.3, 0.4}, dims, {1, 0, 0, 1}), "empty box", EnergyError);
}

TEST_CASE("region energy is the box energy of an arbitrary cell set") {
  const GridDims dims{2, 2};
  const std::vector<double> a{0.5, 0.25, 0.1, 0.15};
  CHECK(region_energy(a, CellSet(dims, {{0, 0}, {0, 1}})) == doctest::Approx(0.0625).epsilon(1e-12));
  CHECK_THROWS_WITH_AS(region_energy(a, CellSet(dims, {})), "empty region", EnergyError);
}

TEST_CASE("analytic attention gradient matches central differences") {
  std::mt19937_64 gen(450);
  std::uniform_int_distribution<int> side(2, 8), tokens(1, 4), layer_count(1, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lambdas[] = {0.0, 1.0, 5.0, 10.0, 20.0};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const GridDims dims{side(gen), side(gen)};
    const auto m = static_cast<std::size_t>(tokens(gen));
    const auto layers = static_cast<std::size_t>(layer_count(gen));
    std::vector<AttentionMap> attn;
    for (std::size_t l = 0; l < layers; ++l) attn.push_back(testing::random_attention(gen, l, dims, m));
    std::vector<TokenFields> fields;
    for (std::size_t i = 0; i < m; ++i) {
      if (u(gen) < 0.4 && !(i + 1 == m && fields.empty())) continue;
      std::vector<double> d(dims.size());
      const double r0 = u(gen) * (dims.height - 1), c0 = u(gen) * (dims.width - 1);
      for (int r = 0; r < dims.height; ++r) {
        for (int c = 0; c < dims.width; ++c) d[dims.index(r, c)] = std::hypot(r - std::round(r0), c - std::round(c0));
      }
      fields.push_back(field_for(i, d, dims, layers));
    }
    std::vector<std::size_t> phi(layers);
    for (std::size_t l = 0; l < layers; ++l) phi[l] = l;
    const EnergyConfig cfg{lambdas[trial % 5], 1.0, 1e-8};

    const std::vector<AttentionMap> grad = energy_grad_wrt_attention(attn, fields, phi, cfg);
    std::vector<double> flat, analytic;
    for (std::size_t l = 0; l < layers; ++l) {
      flat.insert(flat.end(), attn[l].values.begin(), attn[l].values.end());
      analytic.insert(analytic.end(), grad[l].values.begin(), grad[l].values.end());
    }
    const std::size_t per_layer = dims.size() * m;
    const auto numeric = testing::central_differences(flat, 1e-6, [&](const std::vector<double>& x) {
      std::vector<AttentionMap> probe = attn;
      for (std::size_t l = 0; l < layers; ++l) {
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(l * per_layer), per_layer, probe[l].values.begin());
      }
      return total_energy(probe, fields, phi, cfg).e_total;
    });
    worst = std::max(worst, testing::max_relative_error(analytic, numeric));

    // Columns of unconstrained tokens carry exactly zero gradient.
    for (std::size_t i = 0; i < m; ++i) {
      const bool constrained = std::any_of(fields.begin(), fields.end(), [&](const TokenFields& f) { return f.token == i; });
      if (constrained) continue;
      for (const AttentionMap& g : grad) {
        for (std::size_t loc = 0; loc < dims.size(); ++loc) REQUIRE(g.at(loc, i) == 0.0);
      }
    }
  }
  MESSAGE("worst attention-side relative error: " << worst);
  CHECK(worst <= 1e-6);
}

TEST_CASE("gradient vanishes at the control-energy minimum") {
  const GridDims dims{1, 4};
  const std::vector<AttentionMap> attn{single_column({0.4, 0.6, 0.0, 0.0}, dims)};
  const std::vector<TokenFields> fields{field_for(0, {0.0, 0.0, 1.0, 2.0}, dims)};
  const EnergyConfig cfg{0.0, 1.0, 1e-8};
  const std::vector<AttentionMap> g = energy_grad_wrt_attention(attn, fields, kLayer0, cfg);
  CHECK(g[0].values[0] == 0.0);
  CHECK(g[0].values[1] == 0.0);
}

TEST_CASE("prior-structure mask: argmax, uniform, hand-enumerated shift") {
  const GridDims dims{4, 4};
  Trajectory centre;
  centre.polylines = {{{0, 0}, {3, 3}}};
  std::vector<double> peaked(16, 0.01);
  peaked[dims.index(0, 3)] = 0.9;
  const CellSet single = prior_structure_mask(peaked, dims, 0.999, centre);
  // Centroid (0, 3) moved onto the bounding-box centre (1.5, 1.5); lround gives the shift (2, -2).
  CHECK(single.cells() == std::vector<Cell>{{2, 1}});

  const CellSet all = prior_structure_mask(std::vector<double>(16, 1.0 / 16), dims, 0.5, centre);
  CHECK(all.size() == 16);

  std::vector<double> two(16, 0.001);
  two[dims.index(0, 0)] = 0.5;
  two[dims.index(0, 1)] = 0.5;
  Trajectory offset;
  offset.polylines = {{{1, 1}, {1, 2}}};
  const CellSet shifted = prior_structure_mask(two, dims, 0.3, offset);
  CHECK(shifted.cells() == std::vector<Cell>{{1, 1}, {1, 2}});

  // A shift that pushes the mask off the grid clips it.
  Trajectory corner;
  corner.polylines = {{{3, 3}}};
  const CellSet clipped = prior_structure_mask(two, dims, 0.3, corner);
  CHECK(clipped.cells() == std::vector<Cell>{{3, 3}});

  CHECK_THROWS_AS(prior_structure_mask(two, dims, 1.0, offset), EnergyError);
}
