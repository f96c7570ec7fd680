#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajguide/formats.hpp"
#include "trajguide/guidance.hpp"
#include "trajguide/scene.hpp"

namespace trajguide {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int verify_failed = 1;
inline constexpr int config_error = 2;
inline constexpr int diverged = 3;
inline constexpr int io_error = 4;
}  // namespace exit_code

/// Command-line overrides applied on top of a loaded config.
struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<double> lambda;
  std::optional<double> eta;
  std::optional<int> steps;
  std::optional<int> guided_steps;
  std::optional<int> repeats;
  std::optional<std::string> out;
};

/// Applies the overrides and revalidates; throws ConfigError.
RunConfig apply_overrides(RunConfig cfg, const RunOverrides& overrides);

/// Demo scene with default model and guidance settings.
RunConfig demo_config();

/// The config's scene suite, or its own prompt and trajectories as a single scene.
std::vector<Scene> scenes_for(const RunConfig& cfg);

/// One sampling run; the scene's seed offset is added to the guidance seed.
SampleResult run_scene(const SandboxModel& model, const Scene& scene, GuidanceConfig cfg,
                       const StepObserver& observer = {});

/// TRAJGUIDE_THREADS caps the pool; default is the hardware concurrency.
int worker_count();

struct Variant {
  std::string name;
  GuidanceMode mode = GuidanceMode::full;
  double lambda = 10.0;
};

struct AblationRow {
  Variant variant;
  double mean_dtl = 0.0;
  std::vector<double> per_scene;
  /// Scenes whose guidance diverged; they score DTL 0.
  int diverged = 0;
};

struct AblationTable {
  std::vector<std::string> scenes;
  std::vector<AblationRow> rows;
};

/// none, prior_structure, trajectory_expand, control_only, full.
std::vector<Variant> ablation_variants(double lambda);
std::vector<Variant> lambda_variants(std::span<const double> values);

AblationTable run_variants(const RunConfig& cfg, std::span<const Variant> variants, int threads);
std::string ablation_csv(const AblationTable& table);
Json ablation_json(const AblationTable& table);

inline constexpr double kAttentionGradTolerance = 1e-6;
inline constexpr double kLatentGradTolerance = 1e-4;
inline constexpr double kEdtTolerance = 1e-12;

struct GradCheckReport {
  int instances = 0;
  double worst_attention = 0.0;
  double worst_latent = 0.0;
  int worst_attention_instance = -1;
  int worst_latent_instance = -1;
  /// Attention maps of the worst instance (one step, upsampled to its grid).
  AttentionTrace worst_trace;
  [[nodiscard]] bool pass() const {
    return worst_attention <= kAttentionGradTolerance && worst_latent <= kLatentGradTolerance;
  }
};

/// Central differences against the analytic gradients on seeded random instances.
/// `corrupt` perturbs the analytic gradient to exercise the failure path.
GradCheckReport check_gradients(int instances, std::uint64_t seed, bool corrupt = false);

struct EdtCheckReport {
  int instances = 0;
  double worst_error = 0.0;
  int worst_instance = -1;
  /// Worst grid as a two-token trace: token 0 is the source mask, token 1 the distance.
  AttentionTrace worst_trace;
  [[nodiscard]] bool pass() const { return worst_error <= kEdtTolerance; }
};

/// Exact EDT against brute-force nearest-source search on seeded grids up to 64x64.
EdtCheckReport check_edt(int instances, std::uint64_t seed, bool corrupt = false);

int cmd_run(const std::filesystem::path& config, const RunOverrides& overrides, std::ostream& out, std::ostream& err);
int cmd_demo(const RunOverrides& overrides, std::ostream& out, std::ostream& err);
int cmd_ablate(const std::filesystem::path& config, const RunOverrides& overrides, std::ostream& out,
               std::ostream& err);
int cmd_sweep_lambda(const std::filesystem::path& config, std::span<const double> values,
                     const RunOverrides& overrides, std::ostream& out, std::ostream& err);

struct VerifyOptions {
  int instances = 100;
  std::uint64_t seed = 450;
  bool corrupt = false;
  std::filesystem::path out = "runs/verify";
};

int cmd_verify_grad(const VerifyOptions& opts, std::ostream& out, std::ostream& err);
int cmd_verify_edt(const VerifyOptions& opts, std::ostream& out, std::ostream& err);

/// Writes plot-ready CSV/JSON series into <run-dir>/plots.
int cmd_render_plots(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);

/// Full command-line entry point (args exclude the program name).
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trajguide
