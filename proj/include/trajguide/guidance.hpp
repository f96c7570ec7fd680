#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "trajguide/energy.hpp"
#include "trajguide/geometry.hpp"
#include "trajguide/metrics.hpp"
#include "trajguide/model.hpp"

namespace trajguide {

enum class GuidanceMode { none, control_only, full, prior_structure, trajectory_expand, box };

std::string_view to_string(GuidanceMode mode);
/// Throws std::invalid_argument for unknown names.
GuidanceMode parse_mode(std::string_view name);

struct GuidanceConfig {
  double eta = 30.0;
  double lambda = 10.0;
  double epsilon = 1.0;
  int guided_steps = 10;
  int repeats_per_step = 5;
  /// Attention layers that contribute energy; empty selects all of them.
  std::vector<std::size_t> layers;
  int total_steps = 50;
  std::uint64_t seed = 450;
  GuidanceMode mode = GuidanceMode::full;
  /// Sandbox schedule; noisier than a 50-step slice of the 1e-4..0.02 DDPM schedule so that
  /// sigma_t^2 * eta reaches the regime where guidance can move attention within K steps.
  double beta_start = 5e-4;
  double beta_end = 0.07;
  /// Dilation radius (cells) of the trajectory-expanding baseline.
  double expand_radius = 2.0;
  /// Relative threshold and warm-up length of the prior-structure baseline.
  double prior_threshold = 0.3;
  int prior_warmup_steps = 5;
  /// Keep every step's attention maps (needed for trace export).
  bool record_attention = false;

  bool operator==(const GuidanceConfig&) const = default;
};

/// Throws std::invalid_argument on out-of-range values.
void validate(const GuidanceConfig& cfg);

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear-beta schedule. Index t runs 0..T with alpha_bar(0) = 1.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;

  [[nodiscard]] int steps() const { return static_cast<int>(betas.size()) - 1; }
  [[nodiscard]] double alpha_bar(int t) const { return alpha_bars[static_cast<std::size_t>(t)]; }
  [[nodiscard]] double sigma(int t) const { return sigmas[static_cast<std::size_t>(t)]; }
};

/// sigma_t = sqrt((1 - alpha_t) / alpha_t) over the cumulative product alpha_t.
NoiseSchedule build_schedule(int steps, double beta_start, double beta_end);
double sigma_from_alpha(double alpha_bar);

/// Energy functional and per-layer targets for the constrained tokens.
struct GuidanceTargets {
  enum class Kind { distance, region };
  Kind kind = Kind::distance;
  EnergyConfig energy;
  std::vector<TokenFields> fields;
  std::vector<TokenRegions> regions;
  std::vector<std::size_t> layers;

  [[nodiscard]] bool empty() const { return kind == Kind::distance ? fields.empty() : regions.empty(); }
};

/// Base-grid distance fields, bilinearly resampled to every attention layer.
std::vector<TokenFields> build_token_fields(const SandboxModel& model, std::span<const Trajectory> trajectories);

EnergyBreakdown evaluate_energy(std::span<const AttentionMap> attn, const GuidanceTargets& targets);
std::vector<AttentionMap> energy_gradient(std::span<const AttentionMap> attn, const GuidanceTargets& targets);

struct UpdateResult {
  LatentState state;
  EnergyBreakdown before;
};

/// One step z <- z - sigma_t^2 * eta * dE/dz. Throws DivergenceError on a non-finite gradient.
UpdateResult guidance_update(const SandboxModel& model, const LatentState& state, const TokenSet& tokens,
                             const GuidanceTargets& targets, double eta);

struct StepRecord {
  int step = 0;
  int t = 0;
  EnergyBreakdown energy;
  double latent_norm = 0.0;
  int guidance_updates = 0;
  int overshoots = 0;
  std::vector<std::string> events;
  /// Final-layer attention column per constrained token, latent resolution.
  std::vector<std::vector<float>> heatmaps;
  /// All layers, upsampled to the latent grid: layer x location x token. Empty unless requested.
  std::vector<float> attention;
};

struct SampleResult {
  RenderedScene scene;
  DtlReport dtl;
  std::vector<StepRecord> steps;
  GuidanceConfig config;
  std::vector<std::size_t> constrained_tokens;
  double wall_seconds = 0.0;
};

using StepObserver = std::function<void(const StepRecord&, const LatentState&)>;

/// Deterministic DDIM-style sampler with energy guidance during the first K steps.
class GuidedSampler {
 public:
  GuidedSampler(const SandboxModel& model, TokenSet tokens, std::vector<Trajectory> trajectories,
                GuidanceConfig cfg);

  [[nodiscard]] bool done() const { return next_step_ >= cfg_.total_steps; }
  [[nodiscard]] int next_step() const { return next_step_; }
  [[nodiscard]] const LatentState& state() const { return state_; }
  [[nodiscard]] const GuidanceTargets& targets() const { return targets_; }
  [[nodiscard]] const NoiseSchedule& schedule() const { return schedule_; }

  /// Replaces the latent and the step counter (instrumentation hook).
  void resume_from(const Latent& z, int step);

  /// Guidance (when step < K) followed by one denoising step.
  const StepRecord& step();
  [[nodiscard]] SampleResult finish();

 private:
  void prepare_targets();
  [[nodiscard]] LatentState state_at(const Latent& z, int t) const;

  const SandboxModel& model_;
  TokenSet tokens_;
  std::vector<Trajectory> trajectories_;
  GuidanceConfig cfg_;
  NoiseSchedule schedule_;
  GuidanceTargets targets_;
  GuidanceTargets display_targets_;
  std::vector<std::string> target_events_;
  LatentState state_;
  int next_step_ = 0;
  std::vector<StepRecord> records_;
  double elapsed_ = 0.0;
};

/// Initial latent z_T for a seed.
Latent initial_latent(const SandboxModel& model, std::uint64_t seed);

SampleResult guided_sample(const SandboxModel& model, const TokenSet& tokens, std::span<const Trajectory> trajectories,
                           const GuidanceConfig& cfg, const StepObserver& observer = {});

}  // namespace trajguide
