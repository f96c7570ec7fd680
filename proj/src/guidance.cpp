#include "trajguide/guidance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "trajguide/rng.hpp"

namespace trajguide {

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::vector<std::size_t> resolve_layers(const SandboxModel& model, const GuidanceConfig& cfg) {
  if (cfg.layers.empty()) {
    std::vector<std::size_t> all(model.layer_count());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  for (std::size_t l : cfg.layers) {
    if (l >= model.layer_count()) throw std::invalid_argument("guidance layer out of range");
  }
  return cfg.layers;
}

std::vector<TokenRegions> regions_per_layer(const SandboxModel& model, std::size_t token, const CellSet& base) {
  TokenRegions tr{token, {}};
  for (std::size_t l = 0; l < model.layer_count(); ++l) tr.per_layer.push_back(resample_region(base, model.layer_dims(l)));
  return {tr};
}

CellSet bounding_box_region(const Trajectory& traj, GridDims dims) {
  const CellSet raster = rasterize_polyline(traj, dims);
  Box b{dims.height, dims.width, -1, -1};
  for (const Cell& c : raster.cells()) {
    b.row0 = std::min(b.row0, c.row);
    b.col0 = std::min(b.col0, c.col);
    b.row1 = std::max(b.row1, c.row);
    b.col1 = std::max(b.col1, c.col);
  }
  std::vector<Cell> cells;
  for (int r = b.row0; r <= b.row1; ++r) {
    for (int c = b.col0; c <= b.col1; ++c) cells.push_back({r, c});
  }
  return CellSet(dims, std::move(cells));
}

// Deterministic DDIM update t -> t-1.
Latent ddim_update(const Latent& z, const Latent& eps, double ab, double ab_prev) {
  Latent next(z.dims, z.channels);
  const double keep = std::sqrt(ab_prev) / std::sqrt(ab);
  for (std::size_t i = 0; i < next.values.size(); ++i) {
    const double x0 = (z.values[i] - std::sqrt(1.0 - ab) * eps.values[i]);
    next.values[i] = keep * x0 + std::sqrt(1.0 - ab_prev) * eps.values[i];
  }
  return next;
}

}  // namespace

std::string_view to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::control_only: return "control_only";
    case GuidanceMode::full: return "full";
    case GuidanceMode::prior_structure: return "prior_structure";
    case GuidanceMode::trajectory_expand: return "trajectory_expand";
    case GuidanceMode::box: return "box";
  }
  return "unknown";
}

GuidanceMode parse_mode(std::string_view name) {
  for (GuidanceMode m : {GuidanceMode::none, GuidanceMode::control_only, GuidanceMode::full,
                         GuidanceMode::prior_structure, GuidanceMode::trajectory_expand, GuidanceMode::box}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown guidance mode: " + std::string(name));
}

void validate(const GuidanceConfig& cfg) {
  if (!(cfg.eta >= 0.0) || !std::isfinite(cfg.eta)) throw std::invalid_argument("eta must be non-negative");
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw std::invalid_argument("lambda must be non-negative");
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (cfg.total_steps < 1) throw std::invalid_argument("total_steps must be at least 1");
  if (cfg.guided_steps < 0 || cfg.guided_steps > cfg.total_steps) {
    throw std::invalid_argument("guided_steps must lie in [0, total_steps]");
  }
  if (cfg.repeats_per_step < 0) throw std::invalid_argument("repeats_per_step must be non-negative");
  if (!(cfg.expand_radius >= 0.0)) throw std::invalid_argument("expand_radius must be non-negative");
  if (!(cfg.prior_threshold > 0.0 && cfg.prior_threshold < 1.0)) {
    throw std::invalid_argument("prior_threshold must lie in (0, 1)");
  }
  if (cfg.prior_warmup_steps < 0 || cfg.prior_warmup_steps > cfg.total_steps) {
    throw std::invalid_argument("prior_warmup_steps must lie in [0, total_steps]");
  }
}

double sigma_from_alpha(double alpha_bar) { return std::sqrt((1.0 - alpha_bar) / alpha_bar); }

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.betas.push_back(0.0);
  s.alpha_bars.push_back(1.0);
  s.sigmas.push_back(0.0);
  double alpha = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    alpha *= 1.0 - beta;
    s.betas.push_back(beta);
    s.alpha_bars.push_back(alpha);
    s.sigmas.push_back(sigma_from_alpha(alpha));
  }
  return s;
}

std::vector<TokenFields> build_token_fields(const SandboxModel& model, std::span<const Trajectory> trajectories) {
  std::vector<TokenFields> out;
  for (const Trajectory& traj : trajectories) {
    const DistanceField base = combined_distance_field(clamped(traj, model.latent_dims()), model.latent_dims());
    TokenFields tf{traj.token_index, {}};
    for (std::size_t l = 0; l < model.layer_count(); ++l) tf.per_layer.push_back(resample_bilinear(base, model.layer_dims(l)));
    out.push_back(std::move(tf));
  }
  return out;
}

EnergyBreakdown evaluate_energy(std::span<const AttentionMap> attn, const GuidanceTargets& targets) {
  if (targets.kind == GuidanceTargets::Kind::distance) {
    return total_energy(attn, targets.fields, targets.layers, targets.energy);
  }
  return region_total_energy(attn, targets.regions, targets.layers);
}

std::vector<AttentionMap> energy_gradient(std::span<const AttentionMap> attn, const GuidanceTargets& targets) {
  if (targets.kind == GuidanceTargets::Kind::distance) {
    return energy_grad_wrt_attention(attn, targets.fields, targets.layers, targets.energy);
  }
  return region_energy_grad_wrt_attention(attn, targets.regions, targets.layers);
}

UpdateResult guidance_update(const SandboxModel& model, const LatentState& state, const TokenSet& tokens,
                             const GuidanceTargets& targets, double eta) {
  const std::vector<AttentionMap> attn = model.attention(state.z, tokens);
  UpdateResult out{state, {}};
  std::vector<AttentionMap> d_attn;
  try {
    out.before = evaluate_energy(attn, targets);
    if (eta != 0.0 && !targets.empty()) d_attn = energy_gradient(attn, targets);
  } catch (const EnergyError& e) {
    throw DivergenceError("guidance diverged: " + std::string(e.what()) + " at t=" + std::to_string(state.t) +
                          " (latent norm " + std::to_string(state.z.norm()) + ")");
  }
  if (!std::isfinite(out.before.e_total)) {
    throw DivergenceError("guidance diverged: non-finite energy at t=" + std::to_string(state.t));
  }
  if (eta == 0.0 || targets.empty()) return out;
  const Latent grad = model.grad_energy_wrt_latent(state, tokens, d_attn);
  if (!all_finite(grad.values)) {
    std::ostringstream msg;
    msg << "guidance diverged: non-finite gradient at t=" << state.t << " (energy " << out.before.e_total
        << ", latent norm " << state.z.norm() << ")";
    throw DivergenceError(msg.str());
  }
  const double step = state.sigma * state.sigma * eta;
  for (std::size_t k = 0; k < grad.values.size(); ++k) out.state.z.values[k] -= step * grad.values[k];
  if (!all_finite(out.state.z.values)) throw DivergenceError("guidance diverged: non-finite latent at t=" + std::to_string(state.t));
  return out;
}

Latent initial_latent(const SandboxModel& model, std::uint64_t seed) {
  Latent z(model.latent_dims(), model.config().channels);
  Rng rng(mix_seed(seed, kNoiseStream));
  for (double& v : z.values) v = rng.normal();
  return z;
}

GuidedSampler::GuidedSampler(const SandboxModel& model, TokenSet tokens, std::vector<Trajectory> trajectories,
                             GuidanceConfig cfg)
    : model_(model), tokens_(std::move(tokens)), trajectories_(std::move(trajectories)), cfg_(std::move(cfg)) {
  validate(cfg_);
  for (const Trajectory& t : trajectories_) {
    validate(t);
    if (t.token_index >= tokens_.size()) throw std::invalid_argument("token index out of range");
  }
  for (std::size_t i = 0; i < trajectories_.size(); ++i) {
    for (std::size_t j = i + 1; j < trajectories_.size(); ++j) {
      if (trajectories_[i].token_index == trajectories_[j].token_index) {
        throw std::invalid_argument("two trajectories bound to the same token");
      }
    }
  }
  schedule_ = build_schedule(cfg_.total_steps, cfg_.beta_start, cfg_.beta_end);
  state_ = state_at(initial_latent(model_, cfg_.seed), cfg_.total_steps);
  prepare_targets();
}

LatentState GuidedSampler::state_at(const Latent& z, int t) const {
  return {z, t, schedule_.alpha_bar(t), schedule_.sigma(t)};
}

void GuidedSampler::resume_from(const Latent& z, int step) {
  if (step < 0 || step > cfg_.total_steps) throw std::invalid_argument("step out of range");
  state_ = state_at(z, cfg_.total_steps - step);
  next_step_ = step;
}

void GuidedSampler::prepare_targets() {
  const std::vector<std::size_t> layers = resolve_layers(model_, cfg_);
  const GridDims grid = model_.latent_dims();

  display_targets_.kind = GuidanceTargets::Kind::distance;
  display_targets_.layers = layers;
  display_targets_.energy = {cfg_.mode == GuidanceMode::control_only ? 0.0 : cfg_.lambda, cfg_.epsilon, 1e-8};
  display_targets_.fields = build_token_fields(model_, trajectories_);

  targets_ = GuidanceTargets{};
  targets_.layers = layers;
  switch (cfg_.mode) {
    case GuidanceMode::none:
      break;
    case GuidanceMode::control_only:
    case GuidanceMode::full:
      targets_ = display_targets_;
      break;
    case GuidanceMode::trajectory_expand:
      targets_.kind = GuidanceTargets::Kind::region;
      for (const Trajectory& t : trajectories_) {
        const CellSet mask = expand_trajectory_to_mask(clamped(t, grid), grid, cfg_.expand_radius);
        for (TokenRegions& r : regions_per_layer(model_, t.token_index, mask)) targets_.regions.push_back(std::move(r));
      }
      break;
    case GuidanceMode::box:
      targets_.kind = GuidanceTargets::Kind::region;
      for (const Trajectory& t : trajectories_) {
        for (TokenRegions& r : regions_per_layer(model_, t.token_index, bounding_box_region(t, grid))) {
          targets_.regions.push_back(std::move(r));
        }
      }
      break;
    case GuidanceMode::prior_structure: {
      targets_.kind = GuidanceTargets::Kind::region;
      // Unguided warm-up from the same noise, then threshold the fine layer's attention.
      LatentState warm = state_;
      for (int k = 0; k < cfg_.prior_warmup_steps; ++k) {
        const DenoiserOutput out = model_.denoise_step(warm, tokens_);
        warm = state_at(ddim_update(warm.z, out.eps_hat, schedule_.alpha_bar(warm.t), schedule_.alpha_bar(warm.t - 1)),
                        warm.t - 1);
      }
      const std::vector<AttentionMap> attn = model_.attention(warm.z, tokens_);
      const AttentionMap& fine = attn.back();
      for (const Trajectory& t : trajectories_) {
        try {
          const CellSet mask = prior_structure_mask(fine.column(t.token_index), fine.dims, cfg_.prior_threshold,
                                                    clamped(t, fine.dims));
          for (TokenRegions& r : regions_per_layer(model_, t.token_index, mask)) targets_.regions.push_back(std::move(r));
        } catch (const EnergyError& e) {
          target_events_.push_back(std::string(e.what()) + " for token " + std::to_string(t.token_index));
        }
      }
      break;
    }
  }
}

const StepRecord& GuidedSampler::step() {
  if (done()) throw std::logic_error("sampler already finished");
  const auto started = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = next_step_;
  rec.t = state_.t;

  double last_guided_energy = NAN;
  if (cfg_.mode != GuidanceMode::none && next_step_ < cfg_.guided_steps) {
    rec.events = target_events_;
    if (!targets_.empty()) {
      double previous = NAN;
      for (int g = 0; g < cfg_.repeats_per_step; ++g) {
        UpdateResult upd = guidance_update(model_, state_, tokens_, targets_, cfg_.eta);
        if (g > 0 && upd.before.e_total > previous) ++rec.overshoots;
        previous = upd.before.e_total;
        state_ = std::move(upd.state);
        ++rec.guidance_updates;
      }
      last_guided_energy = previous;
    }
  }

  const DenoiserOutput out = model_.denoise_step(state_, tokens_);
  const GuidanceTargets& logged = targets_.empty() ? display_targets_ : targets_;
  try {
    rec.energy = logged.empty() ? EnergyBreakdown{} : evaluate_energy(out.attention, logged);
  } catch (const EnergyError& e) {
    throw DivergenceError("guidance diverged: " + std::string(e.what()) + " at t=" + std::to_string(state_.t));
  }
  if (!std::isfinite(rec.energy.e_total)) throw DivergenceError("guidance diverged: non-finite energy");
  // The denoiser pass sees the post-update latent, so its energy closes the last repeat.
  if (rec.guidance_updates > 0 && rec.energy.e_total > last_guided_energy) ++rec.overshoots;
  rec.latent_norm = state_.z.norm();
  if (!std::isfinite(rec.latent_norm)) throw DivergenceError("guidance diverged: non-finite latent");

  const AttentionMap& fine = out.attention.back();
  for (const Trajectory& t : trajectories_) {
    std::vector<float> heat(fine.dims.size());
    for (std::size_t loc = 0; loc < heat.size(); ++loc) heat[loc] = static_cast<float>(fine.at(loc, t.token_index));
    rec.heatmaps.push_back(std::move(heat));
  }
  if (cfg_.record_attention) {
    const GridDims grid = model_.latent_dims();
    const std::size_t m = tokens_.size();
    for (std::size_t l = 0; l < out.attention.size(); ++l) {
      const int f = model_.layer_factor(l);
      const AttentionMap& a = out.attention[l];
      for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
          const std::size_t loc = a.dims.index(r / f, c / f);
          for (std::size_t i = 0; i < m; ++i) rec.attention.push_back(static_cast<float>(a.at(loc, i)));
        }
      }
    }
  }

  const int t = state_.t;
  Latent next = ddim_update(state_.z, out.eps_hat, schedule_.alpha_bar(t), schedule_.alpha_bar(t - 1));
  if (!all_finite(next.values)) throw DivergenceError("sampler diverged at t=" + std::to_string(t));
  state_ = state_at(next, t - 1);
  ++next_step_;
  records_.push_back(std::move(rec));
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return records_.back();
}

SampleResult GuidedSampler::finish() {
  while (!done()) step();
  SampleResult result;
  result.scene = model_.render_scene(state_.z, tokens_);
  result.dtl = evaluate_dtl(result.scene, trajectories_, model_.latent_dims(), model_.config().render_factor);
  result.steps = records_;
  result.config = cfg_;
  for (const Trajectory& t : trajectories_) result.constrained_tokens.push_back(t.token_index);
  result.wall_seconds = elapsed_;
  return result;
}

SampleResult guided_sample(const SandboxModel& model, const TokenSet& tokens, std::span<const Trajectory> trajectories,
                           const GuidanceConfig& cfg, const StepObserver& observer) {
  const auto started = std::chrono::steady_clock::now();
  GuidedSampler sampler(model, tokens, std::vector<Trajectory>(trajectories.begin(), trajectories.end()), cfg);
  while (!sampler.done()) {
    const StepRecord& rec = sampler.step();
    if (observer) observer(rec, sampler.state());
  }
  SampleResult result = sampler.finish();
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace trajguide
