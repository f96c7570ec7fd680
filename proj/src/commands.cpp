#include "trajguide/commands.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "trajguide/rng.hpp"

namespace trajguide {

RunConfig apply_overrides(RunConfig cfg, const RunOverrides& o) {
  if (o.seed) cfg.guidance.seed = *o.seed;
  if (o.mode) {
    try {
      cfg.guidance.mode = parse_mode(*o.mode);
    } catch (const std::exception& e) {
      throw ConfigError(ConfigErrorCode::invalid_value, "--mode", std::string("--mode: ") + e.what());
    }
  }
  if (o.lambda) cfg.guidance.lambda = *o.lambda;
  if (o.eta) cfg.guidance.eta = *o.eta;
  if (o.steps) cfg.guidance.total_steps = *o.steps;
  if (o.guided_steps) cfg.guidance.guided_steps = *o.guided_steps;
  if (o.repeats) cfg.guidance.repeats_per_step = *o.repeats;
  if (o.out) cfg.output_dir = *o.out;
  // Round-trip through the parser so overrides get the same validation as files.
  return run_config_from_json(run_config_to_json(cfg));
}

RunConfig demo_config() {
  const Scene scene = demo_scene();
  RunConfig cfg;
  cfg.prompt = scene.prompt;
  cfg.trajectories = scene.trajectories;
  cfg.output_dir = "runs/demo";
  return cfg;
}

std::vector<Scene> scenes_for(const RunConfig& cfg) {
  if (cfg.suite) return make_scene_suite(cfg.suite->count, cfg.suite->seed, {cfg.model.height, cfg.model.width});
  Scene own;
  own.name = "config";
  own.prompt = cfg.prompt;
  own.trajectories = cfg.trajectories;
  return {own};
}

SampleResult run_scene(const SandboxModel& model, const Scene& scene, GuidanceConfig cfg, const StepObserver& observer) {
  cfg.seed += scene.seed_offset;
  return guided_sample(model, model.embed(scene.prompt), scene.trajectories, cfg, observer);
}

int worker_count() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("TRAJGUIDE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Ablations

std::vector<Variant> ablation_variants(double lambda) {
  return {{"none", GuidanceMode::none, lambda},
          {"prior_structure", GuidanceMode::prior_structure, lambda},
          {"trajectory_expand", GuidanceMode::trajectory_expand, lambda},
          {"control_only", GuidanceMode::control_only, 0.0},
          {"full", GuidanceMode::full, lambda}};
}

std::vector<Variant> lambda_variants(std::span<const double> values) {
  std::vector<Variant> out;
  for (double v : values) out.push_back({fmt::format("lambda={:g}", v), GuidanceMode::full, v});
  return out;
}

AblationTable run_variants(const RunConfig& cfg, std::span<const Variant> variants, int threads) {
  const SandboxModel model(cfg.model);
  const std::vector<Scene> scenes = scenes_for(cfg);
  AblationTable table;
  for (const Scene& s : scenes) table.scenes.push_back(s.name);
  for (const Variant& v : variants) table.rows.push_back({v, 0.0, std::vector<double>(scenes.size(), 0.0), 0});

  const std::size_t jobs = variants.size() * scenes.size();
  std::vector<char> diverged(jobs, 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t vi = job / scenes.size();
      const std::size_t si = job % scenes.size();
      GuidanceConfig g = cfg.guidance;
      g.mode = variants[vi].mode;
      g.lambda = variants[vi].lambda;
      g.record_attention = false;
      try {
        table.rows[vi].per_scene[si] = run_scene(model, scenes[si], g).dtl.value;
      } catch (const DivergenceError&) {
        diverged[job] = 1;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(jobs, 1)));
  std::vector<std::thread> pool;
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    AblationRow& row = table.rows[vi];
    double sum = 0.0;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      sum += row.per_scene[si];
      row.diverged += diverged[vi * scenes.size() + si];
    }
    row.mean_dtl = scenes.empty() ? 0.0 : sum / static_cast<double>(scenes.size());
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::string out = "variant,mode,lambda,mean_dtl,scenes,diverged\n";
  for (const AblationRow& r : table.rows) {
    out += fmt::format("{},{},{:.17g},{:.17g},{},{}\n", r.variant.name, to_string(r.variant.mode), r.variant.lambda,
                       r.mean_dtl, r.per_scene.size(), r.diverged);
  }
  return out;
}

Json ablation_json(const AblationTable& table) {
  Json rows = Json::array();
  for (const AblationRow& r : table.rows) {
    rows.push_back({{"variant", r.variant.name},
                    {"mode", std::string(to_string(r.variant.mode))},
                    {"lambda", r.variant.lambda},
                    {"mean_dtl", r.mean_dtl},
                    {"per_scene", r.per_scene},
                    {"diverged", r.diverged}});
  }
  return Json{{"scenes", table.scenes}, {"rows", std::move(rows)}};
}

// ---------------------------------------------------------------------------
// Verification suites

namespace {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 1e-12;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

Trajectory random_trajectory(Rng& rng, std::size_t token, GridDims dims) {
  Trajectory t;
  t.token_index = token;
  const int vertices = rng.uniform_int(1, 3);
  Polyline line;
  for (int v = 0; v < vertices; ++v) {
    line.push_back({rng.uniform(0.0, dims.height - 1.0), rng.uniform(0.0, dims.width - 1.0)});
  }
  t.polylines.push_back(std::move(line));
  return t;
}

std::vector<std::size_t> random_token_subset(Rng& rng, std::size_t m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m; ++i) {
    if (rng.uniform() < 0.6) out.push_back(i);
  }
  if (out.empty()) out.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(m) - 1)));
  return out;
}

constexpr double kLambdaChoices[] = {0.0, 1.0, 5.0, 10.0, 20.0};

AttentionTrace trace_of(std::span<const AttentionMap> attn, GridDims grid) {
  AttentionTrace t;
  t.height = static_cast<std::uint32_t>(grid.height);
  t.width = static_cast<std::uint32_t>(grid.width);
  t.tokens = static_cast<std::uint32_t>(attn.front().tokens);
  t.layers = static_cast<std::uint32_t>(attn.size());
  t.steps = 1;
  for (const AttentionMap& a : attn) {
    const int fr = grid.height / a.dims.height;
    const int fc = grid.width / a.dims.width;
    for (int r = 0; r < grid.height; ++r) {
      for (int c = 0; c < grid.width; ++c) {
        const std::size_t loc = a.dims.index(r / fr, c / fc);
        for (std::size_t i = 0; i < a.tokens; ++i) t.payload.push_back(static_cast<float>(a.at(loc, i)));
      }
    }
  }
  return t;
}

// Attention-side instance: random row-stochastic maps on one grid, 1-2 layers.
double attention_side_error(Rng& rng, bool corrupt, std::vector<AttentionMap>& attn_out) {
  const GridDims dims{rng.uniform_int(2, 8), rng.uniform_int(2, 8)};
  const auto m = static_cast<std::size_t>(rng.uniform_int(2, 4));
  const auto layers = static_cast<std::size_t>(rng.uniform_int(1, 2));
  std::vector<AttentionMap> attn;
  for (std::size_t l = 0; l < layers; ++l) {
    AttentionMap a(l, dims, m);
    for (std::size_t loc = 0; loc < dims.size(); ++loc) {
      double sum = 0.0;
      for (std::size_t i = 0; i < m; ++i) sum += (a.at(loc, i) = std::exp(1.5 * rng.normal()));
      for (std::size_t i = 0; i < m; ++i) a.at(loc, i) /= sum;
    }
    attn.push_back(std::move(a));
  }
  std::vector<TokenFields> fields;
  for (std::size_t token : random_token_subset(rng, m)) {
    const DistanceField f = combined_distance_field(random_trajectory(rng, token, dims), dims);
    fields.push_back({token, std::vector<DistanceField>(layers, f)});
  }
  std::vector<std::size_t> all_layers(layers);
  for (std::size_t l = 0; l < layers; ++l) all_layers[l] = l;
  const EnergyConfig cfg{kLambdaChoices[rng.uniform_int(0, 4)], 1.0, 1e-8};

  std::vector<AttentionMap> grad = energy_grad_wrt_attention(attn, fields, all_layers, cfg);
  std::vector<double> analytic, numeric;
  const double h = 1e-6;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t k = 0; k < attn[l].values.size(); ++k) {
      const double keep = attn[l].values[k];
      attn[l].values[k] = keep + h;
      const double up = total_energy(attn, fields, all_layers, cfg).e_total;
      attn[l].values[k] = keep - h;
      const double down = total_energy(attn, fields, all_layers, cfg).e_total;
      attn[l].values[k] = keep;
      numeric.push_back((up - down) / (2.0 * h));
      analytic.push_back(grad[l].values[k]);
    }
  }
  if (corrupt) analytic.front() += 1e-3 * (1.0 + std::abs(analytic.front()));
  attn_out = std::move(attn);
  return relative_error(analytic, numeric);
}

// End-to-end instance: a small sandbox model, dE/dz through both attention layers.
double latent_side_error(Rng& rng, bool corrupt, std::vector<AttentionMap>& attn_out, GridDims& grid) {
  ModelConfig mc;
  mc.height = 2 * rng.uniform_int(1, 4);
  mc.width = 2 * rng.uniform_int(1, 4);
  mc.channels = 4;
  mc.seed = static_cast<std::uint64_t>(rng.uniform_int(0, 1 << 30));
  const SandboxModel model(mc);
  grid = model.latent_dims();
  std::vector<int> prompt(static_cast<std::size_t>(rng.uniform_int(2, 4)));
  for (int& id : prompt) id = rng.uniform_int(0, 4095);
  const TokenSet tokens = model.embed(prompt);

  std::vector<Trajectory> trajs;
  for (std::size_t token : random_token_subset(rng, prompt.size())) trajs.push_back(random_trajectory(rng, token, grid));
  const std::vector<TokenFields> fields = build_token_fields(model, trajs);
  std::vector<std::size_t> layers(model.layer_count());
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
  const EnergyConfig cfg{kLambdaChoices[rng.uniform_int(0, 4)], 1.0, 1e-8};

  LatentState state;
  state.z = Latent(grid, mc.channels);
  for (double& v : state.z.values) v = rng.normal();
  state.t = 1;
  state.alpha_bar = 0.5;
  state.sigma = sigma_from_alpha(state.alpha_bar);

  const std::vector<AttentionMap> attn = model.attention(state.z, tokens);
  const Latent grad =
      model.grad_energy_wrt_latent(state, tokens, energy_grad_wrt_attention(attn, fields, layers, cfg));
  std::vector<double> analytic = grad.values;
  std::vector<double> numeric;
  const double h = 1e-4;
  Latent z = state.z;
  for (std::size_t k = 0; k < z.values.size(); ++k) {
    const double keep = z.values[k];
    z.values[k] = keep + h;
    const double up = total_energy(model.attention(z, tokens), fields, layers, cfg).e_total;
    z.values[k] = keep - h;
    const double down = total_energy(model.attention(z, tokens), fields, layers, cfg).e_total;
    z.values[k] = keep;
    numeric.push_back((up - down) / (2.0 * h));
  }
  if (corrupt) analytic.front() += 1e-2 * (1.0 + std::abs(analytic.front()));
  attn_out = attn;
  return relative_error(analytic, numeric);
}

DistanceField brute_force_edt(const CellSet& src) {
  const GridDims dims = src.dims();
  DistanceField out{dims, std::vector<double>(dims.size(), std::numeric_limits<double>::infinity())};
  for (int r = 0; r < dims.height; ++r) {
    for (int c = 0; c < dims.width; ++c) {
      double best = std::numeric_limits<double>::infinity();
      for (const Cell& s : src.cells()) {
        const double dr = r - s.row, dc = c - s.col;
        best = std::min(best, dr * dr + dc * dc);
      }
      out.values[dims.index(r, c)] = std::sqrt(best);
    }
  }
  return out;
}

}  // namespace

GradCheckReport check_gradients(int instances, std::uint64_t seed, bool corrupt) {
  GradCheckReport report;
  report.instances = instances;
  double worst_ratio = -1.0;
  for (int i = 0; i < instances; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    std::vector<AttentionMap> attn;
    const double a_err = attention_side_error(rng, corrupt && i == 0, attn);
    if (a_err > report.worst_attention || report.worst_attention_instance < 0) {
      report.worst_attention = a_err;
      report.worst_attention_instance = i;
    }
    if (a_err / kAttentionGradTolerance > worst_ratio) {
      worst_ratio = a_err / kAttentionGradTolerance;
      report.worst_trace = trace_of(attn, attn.front().dims);
    }
    GridDims grid;
    const double l_err = latent_side_error(rng, corrupt && i == 0, attn, grid);
    if (l_err > report.worst_latent || report.worst_latent_instance < 0) {
      report.worst_latent = l_err;
      report.worst_latent_instance = i;
    }
    if (l_err / kLatentGradTolerance > worst_ratio) {
      worst_ratio = l_err / kLatentGradTolerance;
      report.worst_trace = trace_of(attn, grid);
    }
  }
  return report;
}

EdtCheckReport check_edt(int instances, std::uint64_t seed, bool corrupt) {
  EdtCheckReport report;
  report.instances = instances;
  for (int i = 0; i < instances; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const GridDims dims{rng.uniform_int(1, 64), rng.uniform_int(1, 64)};
    // Mix of sparse and dense source sets; at least one source per grid.
    const double density = std::pow(10.0, rng.uniform(-3.0, -0.3));
    std::vector<Cell> cells;
    for (int r = 0; r < dims.height; ++r) {
      for (int c = 0; c < dims.width; ++c) {
        if (rng.uniform() < density) cells.push_back({r, c});
      }
    }
    if (cells.empty()) cells.push_back({rng.uniform_int(0, dims.height - 1), rng.uniform_int(0, dims.width - 1)});
    const CellSet src(dims, std::move(cells));
    DistanceField fast = distance_transform(src);
    if (corrupt && i == 0) fast.values.front() += 1e-9;
    const DistanceField slow = brute_force_edt(src);
    double err = 0.0;
    for (std::size_t k = 0; k < fast.values.size(); ++k) err = std::max(err, std::abs(fast.values[k] - slow.values[k]));
    if (err > report.worst_error || report.worst_instance < 0) {
      report.worst_error = err;
      report.worst_instance = i;
      AttentionTrace t;
      t.height = static_cast<std::uint32_t>(dims.height);
      t.width = static_cast<std::uint32_t>(dims.width);
      t.tokens = 2;
      t.layers = 1;
      t.steps = 1;
      const std::vector<std::uint8_t> occ = src.occupancy();
      for (std::size_t k = 0; k < fast.values.size(); ++k) {
        t.payload.push_back(static_cast<float>(occ[k]));
        t.payload.push_back(static_cast<float>(fast.values[k]));
      }
      report.worst_trace = std::move(t);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Maps the error classes to exit codes; every command body runs through here.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code::config_error;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return exit_code::diverged;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return exit_code::io_error;
  } catch (const std::invalid_argument& e) {
    err << "config error (invalid_value): " << e.what() << "\n";
    return exit_code::config_error;
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) { write_file(path, std::string_view(text)); }

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

int run_config(const RunConfig& cfg, std::ostream& out) {
  const SandboxModel model(cfg.model);
  Scene scene;
  scene.name = "config";
  scene.prompt = cfg.prompt;
  scene.trajectories = cfg.trajectories;
  const SampleResult result = run_scene(model, scene, cfg.guidance);
  const Manifest manifest = write_run_artifacts(result, cfg, cfg.output_dir);
  out << fmt::format("mode={} seed={} dtl={:.17g}\n", to_string(cfg.guidance.mode), cfg.guidance.seed, result.dtl.value);
  for (std::size_t i = 0; i < result.dtl.tokens.size(); ++i) {
    out << fmt::format("  token {} dtl={:.6f}\n", result.dtl.tokens[i], result.dtl.per_instance[i]);
  }
  out << fmt::format("wrote {} files to {}\n", manifest.files.size() + 1, cfg.output_dir);
  return exit_code::ok;
}

Json series_json(const AblationTable& table, const char* x_label) {
  Json x = Json::array(), y = Json::array();
  for (const AblationRow& r : table.rows) {
    if (std::string_view(x_label) == "lambda") {
      x.push_back(r.variant.lambda);
    } else {
      x.push_back(r.variant.name);
    }
    y.push_back(r.mean_dtl);
  }
  return Json{{"x_label", x_label}, {"y_label", "mean DTL"}, {"x", std::move(x)}, {"y", std::move(y)}};
}

void print_table(const AblationTable& table, std::ostream& out) {
  for (const AblationRow& r : table.rows) {
    out << fmt::format("{:<20} mean DTL {:.4f}  ({} scenes, {} diverged)\n", r.variant.name, r.mean_dtl,
                       r.per_scene.size(), r.diverged);
  }
}

}  // namespace

int cmd_run(const std::filesystem::path& config, const RunOverrides& overrides, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { return run_config(apply_overrides(load_run_config(config), overrides), out); });
}

int cmd_demo(const RunOverrides& overrides, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] { return run_config(apply_overrides(demo_config(), overrides), out); });
}

int cmd_ablate(const std::filesystem::path& config, const RunOverrides& overrides, std::ostream& out,
               std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = apply_overrides(load_run_config(config), overrides);
    const std::vector<Variant> variants = ablation_variants(cfg.guidance.lambda);
    const AblationTable table = run_variants(cfg, variants, worker_count());
    ensure_dir(cfg.output_dir);
    const std::filesystem::path dir = cfg.output_dir;
    write_text(dir / "ablation.csv", ablation_csv(table));
    write_text(dir / "ablation.json", dump_json(ablation_json(table)));
    write_text(dir / "ablation_series.json", dump_json(series_json(table, "variant")));
    print_table(table, out);
    return exit_code::ok;
  });
}

int cmd_sweep_lambda(const std::filesystem::path& config, std::span<const double> values,
                     const RunOverrides& overrides, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (values.empty()) throw ConfigError(ConfigErrorCode::invalid_value, "--values", "--values: at least one lambda required");
    for (double v : values) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ConfigError(ConfigErrorCode::invalid_value, "--values", fmt::format("--values: lambda {} is negative", v));
      }
    }
    const RunConfig cfg = apply_overrides(load_run_config(config), overrides);
    const std::vector<Variant> variants = lambda_variants(values);
    const AblationTable table = run_variants(cfg, variants, worker_count());
    ensure_dir(cfg.output_dir);
    const std::filesystem::path dir = cfg.output_dir;
    write_text(dir / "lambda_sweep.csv", ablation_csv(table));
    write_text(dir / "lambda_sweep.json", dump_json(ablation_json(table)));
    write_text(dir / "lambda_series.json", dump_json(series_json(table, "lambda")));
    print_table(table, out);
    return exit_code::ok;
  });
}

int cmd_verify_grad(const VerifyOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const GradCheckReport r = check_gradients(opts.instances, opts.seed, opts.corrupt);
    out << fmt::format("gradient check over {} instances\n", r.instances);
    out << fmt::format("  attention-side max rel error {:.3e} (tolerance {:.0e}, instance {})\n", r.worst_attention,
                       kAttentionGradTolerance, r.worst_attention_instance);
    out << fmt::format("  end-to-end     max rel error {:.3e} (tolerance {:.0e}, instance {})\n", r.worst_latent,
                       kLatentGradTolerance, r.worst_latent_instance);
    if (r.pass()) {
      out << "PASS\n";
      return exit_code::ok;
    }
    ensure_dir(opts.out);
    const std::filesystem::path dump = opts.out / "verify_grad_worst.atrc";
    write_trace(r.worst_trace, dump);
    out << "FAIL\n";
    err << "worst instance written to " << dump.string() << "\n";
    return exit_code::verify_failed;
  });
}

int cmd_verify_edt(const VerifyOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const EdtCheckReport r = check_edt(opts.instances, opts.seed, opts.corrupt);
    out << fmt::format("distance transform check over {} grids\n", r.instances);
    out << fmt::format("  max abs error {:.3e} (tolerance {:.0e}, instance {})\n", r.worst_error, kEdtTolerance,
                       r.worst_instance);
    if (r.pass()) {
      out << "PASS\n";
      return exit_code::ok;
    }
    ensure_dir(opts.out);
    const std::filesystem::path dump = opts.out / "verify_edt_worst.atrc";
    write_trace(r.worst_trace, dump);
    out << "FAIL\n";
    err << "worst instance written to " << dump.string() << "\n";
    return exit_code::verify_failed;
  });
}

int cmd_render_plots(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (!std::filesystem::is_directory(run_dir)) {
      throw ConfigError(ConfigErrorCode::missing_file, run_dir.string(), run_dir.string() + ": not a run directory");
    }
    const std::filesystem::path plots = run_dir / "plots";
    int written = 0;
    auto emit = [&](const char* name, const Json& j) {
      ensure_dir(plots);
      write_text(plots / name, dump_json(j));
      ++written;
    };

    if (std::filesystem::exists(run_dir / "energies.csv")) {
      const Bytes raw = read_file(run_dir / "energies.csv");
      std::istringstream lines(std::string(raw.begin(), raw.end()));
      std::string line;
      std::getline(lines, line);
      Json steps = Json::array(), ec = Json::array(), em = Json::array(), et = Json::array();
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream row(line);
        for (std::string cell; std::getline(row, cell, ',');) cols.push_back(cell);
        if (cols.size() < 5) throw IoError(fmt::format("{}: malformed energies row", (run_dir / "energies.csv").string()));
        steps.push_back(std::stoi(cols[0]));
        ec.push_back(std::stod(cols[2]));
        em.push_back(std::stod(cols[3]));
        et.push_back(std::stod(cols[4]));
      }
      emit("energy_series.json", Json{{"x_label", "step"},
                                      {"x", std::move(steps)},
                                      {"series", {{"e_control", std::move(ec)}, {"e_movement", std::move(em)}, {"e_total", std::move(et)}}}});
    }
    if (std::filesystem::exists(run_dir / "metrics.json")) {
      const Bytes raw = read_file(run_dir / "metrics.json");
      const Json metrics = Json::parse(raw.begin(), raw.end());
      Json x = Json::array(), y = Json::array();
      for (const Json& inst : metrics.at("metrics").at("dtl_per_instance")) {
        x.push_back(inst.at("token"));
        y.push_back(inst.at("dtl"));
      }
      emit("dtl_per_instance.json", Json{{"x_label", "token"}, {"y_label", "DTL"}, {"x", std::move(x)}, {"y", std::move(y)}});
    }
    if (std::filesystem::exists(run_dir / "attention.atrc")) {
      const AttentionTrace trace = read_trace(run_dir / "attention.atrc");
      if (trace.steps > 0) {
        // Final step, final layer, one grid per token.
        const std::size_t grid = std::size_t{trace.height} * trace.width;
        const std::size_t base = (std::size_t{trace.steps} * trace.layers - 1) * grid * trace.tokens;
        Json maps = Json::array();
        for (std::size_t i = 0; i < trace.tokens; ++i) {
          Json rows = Json::array();
          for (std::uint32_t r = 0; r < trace.height; ++r) {
            Json row = Json::array();
            for (std::uint32_t c = 0; c < trace.width; ++c) row.push_back(trace.payload[base + (r * trace.width + c) * trace.tokens + i]);
            rows.push_back(std::move(row));
          }
          maps.push_back({{"token", i}, {"grid", std::move(rows)}});
        }
        emit("attention_final.json", Json{{"height", trace.height}, {"width", trace.width}, {"maps", std::move(maps)}});
      }
    }
    for (const char* table : {"ablation", "lambda_sweep"}) {
      const std::filesystem::path src = run_dir / (std::string(table) + ".json");
      if (!std::filesystem::exists(src)) continue;
      const Bytes raw = read_file(src);
      const Json j = Json::parse(raw.begin(), raw.end());
      Json x = Json::array(), y = Json::array();
      for (const Json& r : j.at("rows")) {
        x.push_back(std::string_view(table) == "ablation" ? r.at("variant") : r.at("lambda"));
        y.push_back(r.at("mean_dtl"));
      }
      const std::string name = std::string(table) + "_series.json";
      emit(name.c_str(), Json{{"x_label", std::string_view(table) == "ablation" ? "variant" : "lambda"},
                              {"y_label", "mean DTL"},
                              {"x", std::move(x)},
                              {"y", std::move(y)}});
    }
    if (written == 0) throw IoError(fmt::format("{}: nothing to plot", run_dir.string()));
    out << fmt::format("wrote {} series to {}\n", written, plots.string());
    return exit_code::ok;
  });
}

// ---------------------------------------------------------------------------
// Command line

namespace {

void add_overrides(CLI::App& cmd, RunOverrides& o) {
  cmd.add_option("--seed", o.seed, "Guidance noise seed");
  cmd.add_option("--mode", o.mode, "none|control_only|full|prior_structure|trajectory_expand|box");
  cmd.add_option("--lambda", o.lambda, "Movement energy weight");
  cmd.add_option("--eta", o.eta, "Guidance step size");
  cmd.add_option("--steps", o.steps, "Total denoising steps");
  cmd.add_option("--guided-steps", o.guided_steps, "Guided steps K");
  cmd.add_option("--repeats", o.repeats, "Guidance repeats per step");
  cmd.add_option("--out", o.out, "Output directory");
}

void add_verify(CLI::App& cmd, VerifyOptions& v) {
  cmd.add_option("--instances", v.instances, "Number of seeded instances")->check(CLI::PositiveNumber);
  cmd.add_option("--seed", v.seed, "Instance seed");
  cmd.add_flag("--corrupt", v.corrupt, "Perturb the checked result (test hook)");
  cmd.add_option("--out", v.out, "Directory for the worst-case dump");
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Trajectory-guided layout control in a sandbox diffusion model", "trajguide"};
  app.require_subcommand(1, 1);

  RunOverrides overrides;
  std::string config;
  std::vector<double> values;
  VerifyOptions verify;
  std::string run_dir;

  CLI::App* demo = app.add_subcommand("demo", "Run the built-in two-object scene");
  add_overrides(*demo, overrides);
  CLI::App* run = app.add_subcommand("run", "Run one config and write its run directory");
  run->add_option("config", config, "Run config JSON")->required();
  add_overrides(*run, overrides);
  CLI::App* ablate = app.add_subcommand("ablate", "Compare guidance variants over the scene suite");
  ablate->add_option("config", config, "Run config JSON")->required();
  add_overrides(*ablate, overrides);
  CLI::App* sweep = app.add_subcommand("sweep-lambda", "Mean DTL per lambda over the scene suite");
  sweep->add_option("config", config, "Run config JSON")->required();
  sweep->add_option("--values", values, "Comma-separated lambda values")->delimiter(',')->required();
  add_overrides(*sweep, overrides);
  CLI::App* vgrad = app.add_subcommand("verify-grad", "Finite-difference gradient check");
  add_verify(*vgrad, verify);
  CLI::App* vedt = app.add_subcommand("verify-edt", "Brute-force distance transform check");
  add_verify(*vedt, verify);
  CLI::App* plots = app.add_subcommand("render-plots", "Emit plot series for a run directory");
  plots->add_option("run-dir", run_dir, "Run directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::ok : exit_code::config_error;
  }

  if (demo->parsed()) return cmd_demo(overrides, out, err);
  if (run->parsed()) return cmd_run(config, overrides, out, err);
  if (ablate->parsed()) return cmd_ablate(config, overrides, out, err);
  if (sweep->parsed()) return cmd_sweep_lambda(config, values, overrides, out, err);
  if (vgrad->parsed()) return cmd_verify_grad(verify, out, err);
  if (vedt->parsed()) return cmd_verify_edt(verify, out, err);
  return cmd_render_plots(run_dir, out, err);
}

}  // namespace trajguide
