#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "trajguide/geometry.hpp"

namespace trajguide {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dimensions and fixed hyperparameters of the sandbox denoiser.
struct ModelConfig {
  int height = 16;
  int width = 16;
  int channels = 8;
  int d_k = 8;
  int layers = 2;
  std::uint64_t seed = 7;
  /// Scale of the query projection; larger values sharpen attention.
  double query_gain = 3.0;
  /// Weight of the attention-output path in the noise head.
  double feedback = 0.35;
  /// Image pixels per latent cell.
  int render_factor = 8;
  /// Ground-truth footprint radius in blob standard deviations.
  double mask_sigma = 1.0;

  bool operator==(const ModelConfig&) const = default;
};

/// Validates the config; throws ShapeError on unusable dimensions.
void validate(const ModelConfig& cfg);

struct TokenSet {
  std::vector<int> tokens;
  int d_k = 0;
  /// m x d_k, unit-norm rows.
  std::vector<double> embeddings;

  [[nodiscard]] std::size_t size() const { return tokens.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return std::span(embeddings).subspan(i * static_cast<std::size_t>(d_k), static_cast<std::size_t>(d_k));
  }
};

/// Seeded lookup table: each token id maps to the same unit vector regardless of position.
TokenSet embed_tokens(std::span<const int> prompt, int d_k, std::uint64_t seed);

/// H x W x C latent, channel-fastest.
struct Latent {
  GridDims dims;
  int channels = 0;
  std::vector<double> values;

  Latent() = default;
  Latent(GridDims d, int c) : dims(d), channels(c), values(d.size() * static_cast<std::size_t>(c), 0.0) {}

  [[nodiscard]] std::span<double> cell(std::size_t loc) {
    return std::span(values).subspan(loc * static_cast<std::size_t>(channels), static_cast<std::size_t>(channels));
  }
  [[nodiscard]] std::span<const double> cell(std::size_t loc) const {
    return std::span(values).subspan(loc * static_cast<std::size_t>(channels), static_cast<std::size_t>(channels));
  }
  [[nodiscard]] double norm() const;
  bool operator==(const Latent&) const = default;
};

struct LatentState {
  Latent z;
  int t = 0;
  double alpha_bar = 1.0;
  double sigma = 0.0;
};

/// Location-over-token attention for one layer; rows are softmax distributions.
struct AttentionMap {
  std::size_t layer = 0;
  GridDims dims;
  std::size_t tokens = 0;
  std::vector<double> values;

  AttentionMap() = default;
  AttentionMap(std::size_t l, GridDims d, std::size_t m) : layer(l), dims(d), tokens(m), values(d.size() * m, 0.0) {}

  [[nodiscard]] double at(std::size_t loc, std::size_t token) const { return values[loc * tokens + token]; }
  double& at(std::size_t loc, std::size_t token) { return values[loc * tokens + token]; }
  [[nodiscard]] std::vector<double> column(std::size_t token) const;
};

/// Row-softmax of features . keys^T / sqrt(d_k). `keys` is m x d_k row-major.
AttentionMap cross_attention(std::span<const double> features, GridDims dims, std::span<const double> keys,
                             std::size_t tokens, int d_k, std::size_t layer = 0);
AttentionMap cross_attention(std::span<const double> features, GridDims dims, const TokenSet& tokens);

struct DenoiserOutput {
  Latent eps_hat;
  std::vector<AttentionMap> attention;
};

struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> intensity;
  /// Token slot with the strongest blob at each pixel.
  std::vector<int> labels;
};

/// Gaussian blob in image pixel coordinates.
struct Blob {
  std::size_t token = 0;
  double center_row = 0.0;
  double center_col = 0.0;
  double cov_rr = 0.0;
  double cov_rc = 0.0;
  double cov_cc = 0.0;
};

struct GroundTruthMask {
  std::size_t token = 0;
  CellSet pixels;
};

struct RenderedScene {
  Image image;
  std::vector<Blob> blobs;
  std::vector<GroundTruthMask> masks;
  AttentionMap final_attention;
};

/// Untrained, seeded two-resolution cross-attention denoiser.
///
/// Layer l attends at the latent resolution divided by 2^(layers-1-l); the
/// coarse layers feed the fine ones through a residual stream. The value
/// projection is tied to the query/key projections, so a cell pulled towards
/// a token keeps drifting towards it as denoising proceeds.
class SandboxModel {
 public:
  explicit SandboxModel(ModelConfig cfg);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] GridDims latent_dims() const { return {cfg_.height, cfg_.width}; }
  [[nodiscard]] GridDims layer_dims(std::size_t layer) const;
  [[nodiscard]] int layer_factor(std::size_t layer) const;
  [[nodiscard]] std::size_t layer_count() const { return static_cast<std::size_t>(cfg_.layers); }
  [[nodiscard]] GridDims image_dims() const {
    return {cfg_.height * cfg_.render_factor, cfg_.width * cfg_.render_factor};
  }

  [[nodiscard]] TokenSet embed(std::span<const int> prompt) const { return embed_tokens(prompt, cfg_.d_k, cfg_.seed); }

  [[nodiscard]] DenoiserOutput denoise_step(const LatentState& state, const TokenSet& tokens) const;
  [[nodiscard]] std::vector<AttentionMap> attention(const Latent& z, const TokenSet& tokens) const;

  /// Reverse pass: given dE/dA for every layer, returns dE/dz.
  [[nodiscard]] Latent grad_energy_wrt_latent(const LatentState& state, const TokenSet& tokens,
                                              std::span<const AttentionMap> energy_grad) const;

  [[nodiscard]] RenderedScene render_scene(const Latent& z0, const TokenSet& tokens) const;

 private:
  struct LayerWeights {
    std::vector<double> query;  // d_k x C
    std::vector<double> key;    // d_k x d_k
  };
  struct LayerCache {
    std::vector<double> features;  // N x C
    std::vector<double> keys;      // m x d_k
    std::vector<double> values;    // m x C
    AttentionMap attention;
  };
  struct ForwardCache {
    std::vector<LayerCache> layers;
    Latent stream_out;  // residual stream after the last layer
  };

  void check(const Latent& z, const TokenSet& tokens) const;
  [[nodiscard]] ForwardCache forward(const Latent& z, const TokenSet& tokens) const;

  ModelConfig cfg_;
  std::vector<LayerWeights> weights_;
};

}  // namespace trajguide
