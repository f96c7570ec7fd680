// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <fmt/format.h>

#include <chrono>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "support.hpp"
#include "trajguide/commands.hpp"
#include "trajguide/energy.hpp"
#include "trajguide/metrics.hpp"
#include "trajguide/service.hpp"

using namespace trajguide;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Suite {
 public:
  void run(const std::string& name, double budget_seconds, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > budget_seconds) {
      o.pass = false;
      o.detail += fmt::format("; over the {:.0f} s budget", budget_seconds);
    }
    std::cout << fmt::format("[{}] {:<22} {} ({:.2f} s)\n", o.pass ? "PASS" : "FAIL", name, o.detail, secs)
              << std::flush;
    failures_ += o.pass ? 0 : 1;
  }
  [[nodiscard]] int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

std::filesystem::path work_dir() {
  const std::filesystem::path dir = std::filesystem::current_path() / "acceptance_runs";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// The 20-scene seeded suite on the default model and guidance settings.
RunConfig suite_config() {
  RunConfig cfg = demo_config();
  cfg.suite = SuiteSpec{};
  return cfg;
}

/// Suite means per variant, computed single-threaded and shared between criteria.
class SuiteRuns {
 public:
  const AblationRow& row(const Variant& v) {
    for (const AblationRow& r : rows_) {
      if (r.variant.name == v.name) return r;
    }
    const std::vector<Variant> one{v};
    rows_.push_back(run_variants(suite_config(), one, 1).rows.front());
    return rows_.back();
  }

 private:
  std::vector<AblationRow> rows_;
};

Outcome edt_oracle() {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> side(1, 64);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const GridDims dims{side(gen), side(gen)};
    const double density = std::pow(10.0, -3.0 * u(gen));
    std::vector<Cell> cells;
    for (int r = 0; r < dims.height; ++r) {
      for (int c = 0; c < dims.width; ++c) {
        if (u(gen) < density) cells.push_back({r, c});
      }
    }
    if (cells.empty()) cells.push_back({static_cast<int>(gen() % dims.height), static_cast<int>(gen() % dims.width)});
    const CellSet src(dims, cells);
    const DistanceField fast = distance_transform(src);
    const std::vector<double> slow = testing::brute_force_distances(src);
    for (std::size_t k = 0; k < slow.size(); ++k) worst = std::max(worst, std::abs(fast.values[k] - slow[k]));
  }
  return {worst <= 1e-12, fmt::format("100 grids up to 64x64, max |EDT - brute force| = {:.3g}", worst)};
}

Outcome gradient_checks() {
  std::mt19937_64 gen(450);
  std::uniform_int_distribution<int> side(2, 8), half(1, 4), tokens(2, 4), layer_count(1, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_attention = 0.0, worst_latent = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    // Attention side: random maps and random distance fields.
    const GridDims dims{side(gen), side(gen)};
    const auto m = static_cast<std::size_t>(tokens(gen));
    const auto layers = static_cast<std::size_t>(layer_count(gen));
    std::vector<AttentionMap> attn;
    for (std::size_t l = 0; l < layers; ++l) attn.push_back(testing::random_attention(gen, l, dims, m));
    std::vector<TokenFields> fields;
    for (std::size_t i = 0; i < m; ++i) {
      if (i > 0 && u(gen) < 0.4) continue;
      std::vector<double> d(dims.size());
      const int r0 = static_cast<int>(gen() % dims.height), c0 = static_cast<int>(gen() % dims.width);
      for (int r = 0; r < dims.height; ++r) {
        for (int c = 0; c < dims.width; ++c) d[dims.index(r, c)] = std::hypot(r - r0, c - c0);
      }
      fields.push_back({i, std::vector<DistanceField>(layers, DistanceField{dims, d})});
    }
    std::vector<std::size_t> phi(layers);
    for (std::size_t l = 0; l < layers; ++l) phi[l] = l;
    const EnergyConfig cfg{20.0 * u(gen), 1.0, 1e-8};
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
    worst_attention = std::max(worst_attention, testing::max_relative_error(analytic, numeric));

    // End to end: latent -> attention -> energy through the sandbox model.
    ModelConfig mc;
    mc.height = 2 * half(gen);
    mc.width = 2 * half(gen);
    mc.channels = 4;
    mc.seed = gen();
    const SandboxModel model(mc);
    const GridDims grid = model.latent_dims();
    std::vector<int> prompt(m);
    for (int& id : prompt) id = static_cast<int>(gen() % 4096);
    const TokenSet toks = model.embed(prompt);
    Trajectory traj;
    traj.token_index = gen() % m;
    traj.polylines = {{{u(gen) * (grid.height - 1), u(gen) * (grid.width - 1)},
                       {u(gen) * (grid.height - 1), u(gen) * (grid.width - 1)}}};
    const std::vector<Trajectory> trajs{traj};
    const std::vector<TokenFields> model_fields = build_token_fields(model, trajs);
    const std::vector<std::size_t> both{0, 1};
    LatentState s;
    s.z = Latent(grid, mc.channels);
    std::normal_distribution<double> normal;
    for (double& v : s.z.values) v = normal(gen);
    s.t = 25;
    s.sigma = 1.0;
    const Latent dz = model.grad_energy_wrt_latent(
        s, toks, energy_grad_wrt_attention(model.attention(s.z, toks), model_fields, both, cfg));
    const auto fd = testing::central_differences(s.z.values, 1e-4, [&](const std::vector<double>& x) {
      Latent z = s.z;
      z.values = x;
      return total_energy(model.attention(z, toks), model_fields, both, cfg).e_total;
    });
    worst_latent = std::max(worst_latent, testing::max_relative_error(dz.values, fd));
  }
  return {worst_attention <= 1e-6 && worst_latent <= 1e-4,
          fmt::format("100 instances, attention rel err {:.3g} (<= 1e-6), end-to-end {:.3g} (<= 1e-4)", worst_attention,
                      worst_latent)};
}

Outcome energy_algebra() {
  std::mt19937_64 gen(646);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const EnergyConfig cfg;
  bool ok = true;
  std::vector<std::string> broken;

  // E_c = 0 iff all attention is on the trajectory.
  for (int i = 0; i < 500; ++i) {
    std::vector<double> d(24), a(24);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = (k % 4 == 0) ? 0.0 : 1.0 + 5.0 * u(gen);
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = d[k] == 0.0 ? 0.01 + u(gen) : 0.0;
    const bool on = control_energy(a, d, cfg) <= 1e-9;
    a[1 + (i % 18) / 3 * 4] = 0.05 + u(gen);
    const bool off = control_energy(a, d, cfg) > 1e-9;
    if (!on || !off) {
      ok = false;
      broken.push_back("iff");
      break;
    }
  }

  // Scale invariance.
  const GridDims dims{4, 6};
  const Box box{1, 2, 2, 4};
  double scale_err = 0.0;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> a(dims.size()), d(dims.size());
    for (double& v : a) v = 0.01 + u(gen);
    for (double& v : d) v = 5.0 * u(gen);
    const double c = std::pow(10.0, 4.0 * u(gen) - 2.0);
    std::vector<double> ca = a;
    for (double& v : ca) v *= c;
    auto rel = [](double x, double y) { return std::abs(x - y) / std::max(1.0, std::abs(y)); };
    scale_err = std::max({scale_err, rel(control_energy(ca, d, cfg), control_energy(a, d, cfg)),
                          rel(movement_energy(ca, d, cfg), movement_energy(a, d, cfg)),
                          rel(box_energy(ca, dims, box), box_energy(a, dims, box))});
  }
  if (scale_err > 1e-12) {
    ok = false;
    broken.push_back("scale");
  }

  // Additivity.
  double add_err = 0.0;
  for (int i = 0; i < 200; ++i) {
    std::vector<AttentionMap> attn{testing::random_attention(gen, 0, dims, 3), testing::random_attention(gen, 1, dims, 3)};
    std::vector<double> d(dims.size());
    for (double& v : d) v = 6.0 * u(gen);
    const std::vector<TokenFields> fields{{2, std::vector<DistanceField>(2, DistanceField{dims, d})}};
    const std::vector<std::size_t> layers{0, 1};
    const EnergyConfig c{20.0 * u(gen), 1.0, 1e-8};
    const EnergyBreakdown e = total_energy(attn, fields, layers, c);
    add_err = std::max(add_err, std::abs(e.e_total - (e.e_control + c.lambda * e.e_movement)));
  }
  if (add_err > 1e-12) {
    ok = false;
    broken.push_back("additivity");
  }

  // Moving mass to a cell nearer the trajectory never raises E_c.
  int moves = 0, violations = 0;
  std::uniform_int_distribution<std::size_t> pick(0, 24);
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
    if (control_energy(b, d, cfg) > control_energy(a, d, cfg) + 1e-14) ++violations;
    ++moves;
  }
  if (violations > 0) {
    ok = false;
    broken.push_back("mass transport");
  }

  std::string detail = fmt::format("iff, scale err {:.2g}, additivity err {:.2g}, {} moves with {} increases",
                                   scale_err, add_err, moves, violations);
  for (const std::string& b : broken) detail += "; broken: " + b;
  return {ok, detail};
}

Outcome dtl_unit_values() {
  const CellSet on({6, 6}, {{2, 1}, {2, 2}, {2, 3}});
  const double exact = dtl_instance({0, on, MaskSource::ground_truth}, distance_transform(on));

  DistanceField d{{1, 2}, {0.0, 1.0}};
  const double two = dtl_instance({0, CellSet({1, 2}, {{0, 0}, {0, 1}}), MaskSource::ground_truth}, d);
  const double expected = (1.0 + std::exp(-1.0)) / 2.0;
  return {exact == 1.0 && std::abs(two - expected) <= 1e-12,
          fmt::format("on-trajectory DTL = {:.17g}, D={{0,1}} DTL - (1+e^-1)/2 = {:.3g}", exact, two - expected)};
}

Outcome guidance_effect(SuiteRuns& runs) {
  const double none = runs.row({"none", GuidanceMode::none, 10.0}).mean_dtl;
  const double control = runs.row({"control_only", GuidanceMode::control_only, 0.0}).mean_dtl;
  const double full = runs.row({"full", GuidanceMode::full, 10.0}).mean_dtl;
  const bool ok = full >= 2.0 * none && full > control && control > none;
  return {ok, fmt::format("20 scenes: full {:.4f}, control_only {:.4f}, none {:.4f}, full/none {:.2f}x", full,
                          control, none, full / none)};
}

Outcome lambda_sweep(SuiteRuns& runs) {
  auto mean = [&](double lambda) {
    return runs.row({fmt::format("lambda={}", lambda), GuidanceMode::full, lambda}).mean_dtl;
  };
  double best = 0.0;
  std::string listing;
  for (double l : {1.0, 5.0, 10.0, 20.0}) {
    best = std::max(best, mean(l));
    listing += fmt::format("{}:{:.4f} ", l, mean(l));
  }
  const double at0 = mean(0.0), at100 = mean(100.0);
  const int diverged = runs.row({"lambda=100", GuidanceMode::full, 100.0}).diverged;
  return {at100 < best && at0 < best,
          fmt::format("lambda 0:{:.4f} {}100:{:.4f} ({} diverged); best of 1..20 = {:.4f}", at0, listing, at100,
                      diverged, best)};
}

Outcome determinism(const std::filesystem::path& dir) {
  const std::filesystem::path cfg = dir / "determinism.json";
  save_run_config(demo_config(), cfg);
  std::ostringstream out, err;
  const int a = cli_main({"run", cfg.string(), "--seed", "450", "--out", (dir / "det_a").string()}, out, err);
  const int b = cli_main({"run", cfg.string(), "--seed", "450", "--out", (dir / "det_b").string()}, out, err);
  if (a != 0 || b != 0) return {false, fmt::format("run exit codes {} and {}: {}", a, b, err.str())};
  const Bytes ma = read_file(dir / "det_a" / "manifest.json");
  const Bytes mb = read_file(dir / "det_b" / "manifest.json");
  const Manifest parsed = read_manifest(dir / "det_a" / "manifest.json");
  return {ma == mb, fmt::format("manifests {} ({} files, {} bytes)", ma == mb ? "identical" : "differ",
                                parsed.files.size(), ma.size())};
}

Outcome baseline_parity(SuiteRuns& runs) {
  const AblationRow& prior = runs.row({"prior_structure", GuidanceMode::prior_structure, 10.0});
  const AblationRow& expand = runs.row({"trajectory_expand", GuidanceMode::trajectory_expand, 10.0});
  const double full = runs.row({"full", GuidanceMode::full, 10.0}).mean_dtl;
  const bool ok = prior.mean_dtl < full && expand.mean_dtl < full && prior.per_scene.size() == 20 &&
                  expand.per_scene.size() == 20;
  return {ok, fmt::format("prior_structure {:.4f} ({} diverged), trajectory_expand {:.4f} ({} diverged), full {:.4f}",
                          prior.mean_dtl, prior.diverged, expand.mean_dtl, expand.diverged, full)};
}

Outcome service_parity(const std::filesystem::path& dir) {
  const RunConfig cfg = demo_config();
  const std::filesystem::path cfg_path = dir / "parity.json";
  save_run_config(cfg, cfg_path);
  std::ostringstream out, err;
  if (cli_main({"run", cfg_path.string(), "--out", (dir / "parity_cli").string()}, out, err) != 0) {
    return {false, "CLI run failed: " + err.str()};
  }
  const std::string text = out.str();
  const double cli_dtl = std::stod(text.substr(text.find("dtl=") + 4));

  ServiceOptions opts;
  opts.runs_dir = dir / "service_runs";
  SessionService service(opts);
  httplib::Server server;
  service.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  Outcome o{false, ""};
  {
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(300, 0);
    auto created = client.Post("/sessions", run_config_to_json(cfg).dump(), "application/json");
    auto stream = created && created->status == 201
                      ? client.Post("/sessions/" + Json::parse(created->body)["session_id"].get<std::string>() + "/run",
                                    "", "application/json")
                      : httplib::Result();
    if (!stream || stream->status != 202) {
      o.detail = "service did not accept the run";
    } else {
      int steps = 0, terminals = 0;
      std::optional<double> service_dtl;
      std::istringstream lines(stream->body);
      std::string line, event;
      while (std::getline(lines, line)) {
        if (line.rfind("event: ", 0) == 0) {
          event = line.substr(7);
          steps += event == "step" ? 1 : 0;
          terminals += (event == "done" || event == "failed") ? 1 : 0;
        } else if (line.rfind("data: ", 0) == 0 && event == "done") {
          service_dtl = Json::parse(line.substr(6))["dtl"].get<double>();
        }
      }
      const int total = cfg.guidance.total_steps;
      o.pass = service_dtl && *service_dtl == cli_dtl && steps == total && terminals == 1;
      o.detail = fmt::format("{} step events (T = {}), {} terminal, service DTL {:.17g} vs CLI {:.17g}", steps, total,
                             terminals, service_dtl.value_or(NAN), cli_dtl);
    }
  }
  server.stop();
  listener.join();
  return o;
}

}  // namespace

int main() {
  const std::filesystem::path dir = work_dir();
  SuiteRuns runs;
  Suite suite;
  suite.run("edt_oracle", 10, edt_oracle);
  suite.run("gradient_checks", 30, gradient_checks);
  suite.run("energy_algebra", 60, energy_algebra);
  suite.run("dtl_unit_values", 10, dtl_unit_values);
  suite.run("guidance_effect", 300, [&] { return guidance_effect(runs); });
  suite.run("lambda_sweep", 600, [&] { return lambda_sweep(runs); });
  suite.run("determinism", 120, [&] { return determinism(dir); });
  suite.run("baseline_parity", 300, [&] { return baseline_parity(runs); });
  suite.run("service_parity", 120, [&] { return service_parity(dir); });
  std::cout << fmt::format("{} of 9 criteria passed\n", 9 - suite.failures());
  return suite.failures() == 0 ? 0 : 1;
}
