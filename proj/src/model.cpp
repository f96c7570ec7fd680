#include "trajguide/model.hpp"

#include <algorithm>
#include <cmath>

#include "trajguide/rng.hpp"

namespace trajguide {

namespace {

constexpr std::uint64_t kEmbeddingStream = 0x656d626564ULL;
constexpr std::uint64_t kLayerStream = 0x6c61796572ULL;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

void validate(const ModelConfig& cfg) {
  if (cfg.layers < 1) throw ShapeError("model needs at least one layer");
  if (cfg.height < 2 || cfg.width < 2) throw ShapeError("latent grid must be at least 2x2");
  if (cfg.channels < 1) throw ShapeError("latent needs at least one channel");
  if (cfg.d_k < 2) throw ShapeError("d_k must be at least 2");
  if (cfg.render_factor < 1) throw ShapeError("render factor must be positive");
  const int coarsest = 1 << (cfg.layers - 1);
  if (cfg.height % coarsest != 0 || cfg.width % coarsest != 0 || cfg.height / coarsest < 1 ||
      cfg.width / coarsest < 1) {
    throw ShapeError("latent grid must be divisible by 2^(layers-1)");
  }
  if (!(cfg.mask_sigma > 0.0)) throw ShapeError("mask_sigma must be positive");
}

double Latent::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

std::vector<double> AttentionMap::column(std::size_t token) const {
  std::vector<double> col(dims.size());
  for (std::size_t loc = 0; loc < col.size(); ++loc) col[loc] = at(loc, token);
  return col;
}

TokenSet embed_tokens(std::span<const int> prompt, int d_k, std::uint64_t seed) {
  if (prompt.empty()) throw ShapeError("empty prompt");
  if (d_k < 2) throw ShapeError("d_k must be at least 2");
  TokenSet out;
  out.tokens.assign(prompt.begin(), prompt.end());
  out.d_k = d_k;
  out.embeddings.reserve(prompt.size() * static_cast<std::size_t>(d_k));
  for (int id : prompt) {
    Rng rng(mix_seed(seed ^ kEmbeddingStream, static_cast<std::uint64_t>(static_cast<std::uint32_t>(id))));
    std::vector<double> row(static_cast<std::size_t>(d_k));
    double norm = 0.0;
    while (norm < 1e-6) {
      for (double& x : row) x = rng.normal();
      norm = std::sqrt(dot(row, row));
    }
    for (double x : row) out.embeddings.push_back(x / norm);
  }
  return out;
}

AttentionMap cross_attention(std::span<const double> features, GridDims dims, std::span<const double> keys,
                             std::size_t tokens, int d_k, std::size_t layer) {
  const auto width = static_cast<std::size_t>(d_k);
  if (tokens == 0) throw ShapeError("cross attention needs at least one token");
  if (features.size() != dims.size() * width) throw ShapeError("feature width does not match d_k");
  if (keys.size() != tokens * width) throw ShapeError("key matrix does not match d_k");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  AttentionMap out(layer, dims, tokens);
  std::vector<double> logits(tokens);
  for (std::size_t loc = 0; loc < dims.size(); ++loc) {
    const auto q = features.subspan(loc * width, width);
    double peak = -INFINITY;
    for (std::size_t i = 0; i < tokens; ++i) {
      logits[i] = dot(q, keys.subspan(i * width, width)) * scale;
      peak = std::max(peak, logits[i]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < tokens; ++i) {
      logits[i] = std::exp(logits[i] - peak);
      total += logits[i];
    }
    for (std::size_t i = 0; i < tokens; ++i) out.at(loc, i) = logits[i] / total;
  }
  return out;
}

AttentionMap cross_attention(std::span<const double> features, GridDims dims, const TokenSet& tokens) {
  return cross_attention(features, dims, tokens.embeddings, tokens.size(), tokens.d_k);
}

SandboxModel::SandboxModel(ModelConfig cfg) : cfg_(cfg) {
  validate(cfg_);
  const auto c = static_cast<std::size_t>(cfg_.channels);
  const auto dk = static_cast<std::size_t>(cfg_.d_k);
  for (int l = 0; l < cfg_.layers; ++l) {
    Rng rng(mix_seed(cfg_.seed ^ kLayerStream, static_cast<std::uint64_t>(l)));
    LayerWeights w;
    w.query.resize(dk * c);
    w.key.resize(dk * dk);
    const double qscale = cfg_.query_gain / std::sqrt(static_cast<double>(c));
    const double kscale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (double& x : w.query) x = rng.normal() * qscale;
    for (double& x : w.key) x = rng.normal() * kscale;
    weights_.push_back(std::move(w));
  }
}

int SandboxModel::layer_factor(std::size_t layer) const { return 1 << (cfg_.layers - 1 - static_cast<int>(layer)); }

GridDims SandboxModel::layer_dims(std::size_t layer) const {
  const int f = layer_factor(layer);
  return {cfg_.height / f, cfg_.width / f};
}

void SandboxModel::check(const Latent& z, const TokenSet& tokens) const {
  if (z.dims != latent_dims() || z.channels != cfg_.channels ||
      z.values.size() != z.dims.size() * static_cast<std::size_t>(z.channels)) {
    throw ShapeError("latent shape does not match model");
  }
  if (tokens.d_k != cfg_.d_k || tokens.size() == 0 || tokens.embeddings.size() != tokens.size() * static_cast<std::size_t>(cfg_.d_k)) {
    throw ShapeError("token embeddings do not match model");
  }
}

SandboxModel::ForwardCache SandboxModel::forward(const Latent& z, const TokenSet& tokens) const {
  const auto c = static_cast<std::size_t>(cfg_.channels);
  const auto dk = static_cast<std::size_t>(cfg_.d_k);
  const std::size_t m = tokens.size();
  const GridDims full = latent_dims();

  ForwardCache cache;
  Latent stream = z;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    const LayerWeights& w = weights_[l];
    const int f = layer_factor(l);
    const GridDims dims = layer_dims(l);
    LayerCache lc;

    // Average-pool the residual stream to this layer's resolution.
    lc.features.assign(dims.size() * c, 0.0);
    const double inv_area = 1.0 / (f * f);
    for (int r = 0; r < full.height; ++r) {
      for (int q = 0; q < full.width; ++q) {
        const auto src = stream.cell(full.index(r, q));
        double* dst = &lc.features[dims.index(r / f, q / f) * c];
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv_area;
      }
    }

    lc.keys.assign(m * dk, 0.0);
    lc.values.assign(m * c, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto e = tokens.row(i);
      for (std::size_t a = 0; a < dk; ++a) {
        lc.keys[i * dk + a] = dot(std::span(w.key).subspan(a * dk, dk), e);
      }
      // Tied value: the latent direction that raises this token's logit.
      double norm = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t a = 0; a < dk; ++a) s += w.query[a * c + ch] * lc.keys[i * dk + a];
        lc.values[i * c + ch] = s;
        norm += s * s;
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (std::size_t ch = 0; ch < c; ++ch) lc.values[i * c + ch] /= norm;
      }
    }

    std::vector<double> queries(dims.size() * dk);
    for (std::size_t loc = 0; loc < dims.size(); ++loc) {
      const auto feat = std::span<const double>(lc.features).subspan(loc * c, c);
      for (std::size_t a = 0; a < dk; ++a) {
        queries[loc * dk + a] = dot(std::span(w.query).subspan(a * c, c), feat);
      }
    }
    lc.attention = cross_attention(queries, dims, lc.keys, m, cfg_.d_k, l);

    // Attention output, upsampled (nearest) back onto the residual stream.
    for (int r = 0; r < full.height; ++r) {
      for (int q = 0; q < full.width; ++q) {
        const std::size_t loc = dims.index(r / f, q / f);
        auto dst = stream.cell(full.index(r, q));
        for (std::size_t i = 0; i < m; ++i) {
          const double a = lc.attention.at(loc, i);
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += a * lc.values[i * c + ch];
        }
      }
    }
    cache.layers.push_back(std::move(lc));
  }
  cache.stream_out = std::move(stream);
  return cache;
}

std::vector<AttentionMap> SandboxModel::attention(const Latent& z, const TokenSet& tokens) const {
  check(z, tokens);
  ForwardCache cache = forward(z, tokens);
  std::vector<AttentionMap> out;
  for (LayerCache& lc : cache.layers) out.push_back(std::move(lc.attention));
  return out;
}

DenoiserOutput SandboxModel::denoise_step(const LatentState& state, const TokenSet& tokens) const {
  check(state.z, tokens);
  ForwardCache cache = forward(state.z, tokens);
  DenoiserOutput out;
  out.eps_hat = Latent(state.z.dims, state.z.channels);
  // Noise head: the Gaussian-prior estimate plus the attention path.
  const double prior = std::sqrt(std::max(0.0, 1.0 - state.alpha_bar));
  for (std::size_t k = 0; k < state.z.values.size(); ++k) {
    const double z = state.z.values[k];
    out.eps_hat.values[k] = prior * z - cfg_.feedback * (cache.stream_out.values[k] - z);
  }
  for (LayerCache& lc : cache.layers) out.attention.push_back(std::move(lc.attention));
  return out;
}

Latent SandboxModel::grad_energy_wrt_latent(const LatentState& state, const TokenSet& tokens,
                                            std::span<const AttentionMap> energy_grad) const {
  check(state.z, tokens);
  if (energy_grad.size() != layer_count()) throw ShapeError("energy gradient needs one map per layer");
  const std::size_t m = tokens.size();
  for (std::size_t l = 0; l < layer_count(); ++l) {
    if (energy_grad[l].dims != layer_dims(l) || energy_grad[l].tokens != m ||
        energy_grad[l].values.size() != layer_dims(l).size() * m) {
      throw ShapeError("energy gradient shape does not match attention");
    }
  }

  const ForwardCache cache = forward(state.z, tokens);
  const auto c = static_cast<std::size_t>(cfg_.channels);
  const auto dk = static_cast<std::size_t>(cfg_.d_k);
  const GridDims full = latent_dims();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_k));

  Latent grad(full, cfg_.channels);  // dE/d(residual stream), walked back layer by layer
  std::vector<double> d_attn(m);
  std::vector<double> d_query(dk);
  for (std::size_t l = layer_count(); l-- > 0;) {
    const LayerCache& lc = cache.layers[l];
    const LayerWeights& w = weights_[l];
    const int f = layer_factor(l);
    const GridDims dims = layer_dims(l);

    // Adjoint of nearest upsampling: sum the stream gradient over each block.
    std::vector<double> d_out(dims.size() * c, 0.0);
    for (int r = 0; r < full.height; ++r) {
      for (int q = 0; q < full.width; ++q) {
        const auto g = grad.cell(full.index(r, q));
        double* dst = &d_out[dims.index(r / f, q / f) * c];
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += g[ch];
      }
    }

    std::vector<double> d_features(dims.size() * c, 0.0);
    for (std::size_t loc = 0; loc < dims.size(); ++loc) {
      const auto dout = std::span<const double>(d_out).subspan(loc * c, c);
      double weighted = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        d_attn[i] = energy_grad[l].at(loc, i) + dot(dout, std::span(lc.values).subspan(i * c, c));
        weighted += lc.attention.at(loc, i) * d_attn[i];
      }
      std::fill(d_query.begin(), d_query.end(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        const double d_logit = lc.attention.at(loc, i) * (d_attn[i] - weighted) * scale;
        for (std::size_t a = 0; a < dk; ++a) d_query[a] += d_logit * lc.keys[i * dk + a];
      }
      for (std::size_t a = 0; a < dk; ++a) {
        for (std::size_t ch = 0; ch < c; ++ch) d_features[loc * c + ch] += w.query[a * c + ch] * d_query[a];
      }
    }

    // Adjoint of average pooling, added to the identity path of the residual stream.
    const double inv_area = 1.0 / (f * f);
    for (int r = 0; r < full.height; ++r) {
      for (int q = 0; q < full.width; ++q) {
        auto g = grad.cell(full.index(r, q));
        const double* src = &d_features[dims.index(r / f, q / f) * c];
        for (std::size_t ch = 0; ch < c; ++ch) g[ch] += src[ch] * inv_area;
      }
    }
  }
  return grad;
}

RenderedScene SandboxModel::render_scene(const Latent& z0, const TokenSet& tokens) const {
  check(z0, tokens);
  ForwardCache cache = forward(z0, tokens);
  RenderedScene scene;
  scene.final_attention = std::move(cache.layers.back().attention);
  const AttentionMap& attn = scene.final_attention;
  const GridDims grid = attn.dims;
  const double s = static_cast<double>(cfg_.height * cfg_.render_factor) / grid.height;
  const GridDims img = image_dims();

  for (std::size_t i = 0; i < tokens.size(); ++i) {
    double mass = 0.0, mr = 0.0, mc = 0.0;
    for (int r = 0; r < grid.height; ++r) {
      for (int q = 0; q < grid.width; ++q) {
        const double a = attn.at(grid.index(r, q), i);
        mass += a;
        mr += a * r;
        mc += a * q;
      }
    }
    mr /= mass;
    mc /= mass;
    double vrr = 0.0, vrc = 0.0, vcc = 0.0;
    for (int r = 0; r < grid.height; ++r) {
      for (int q = 0; q < grid.width; ++q) {
        const double a = attn.at(grid.index(r, q), i) / mass;
        vrr += a * (r - mr) * (r - mr);
        vrc += a * (r - mr) * (q - mc);
        vcc += a * (q - mc) * (q - mc);
      }
    }
    // In-cell spread keeps the covariance positive definite.
    const double cell_var = 1.0 / 12.0;
    Blob b;
    b.token = i;
    b.center_row = (mr + 0.5) * s - 0.5;
    b.center_col = (mc + 0.5) * s - 0.5;
    b.cov_rr = (vrr + cell_var) * s * s;
    b.cov_rc = vrc * s * s;
    b.cov_cc = (vcc + cell_var) * s * s;
    scene.blobs.push_back(b);
  }

  scene.image.height = img.height;
  scene.image.width = img.width;
  scene.image.intensity.assign(img.size(), 0.0f);
  scene.image.labels.assign(img.size(), 0);
  std::vector<std::vector<Cell>> footprints(tokens.size());
  const double limit = cfg_.mask_sigma * cfg_.mask_sigma;
  for (const Blob& b : scene.blobs) {
    const double det = b.cov_rr * b.cov_cc - b.cov_rc * b.cov_rc;
    const double irr = b.cov_cc / det, irc = -b.cov_rc / det, icc = b.cov_rr / det;
    for (int r = 0; r < img.height; ++r) {
      const double dr = r - b.center_row;
      for (int q = 0; q < img.width; ++q) {
        const double dc = q - b.center_col;
        const double maha = dr * dr * irr + 2.0 * dr * dc * irc + dc * dc * icc;
        const auto value = static_cast<float>(std::exp(-0.5 * maha));
        const std::size_t idx = img.index(r, q);
        if (value > scene.image.intensity[idx]) {
          scene.image.intensity[idx] = value;
          scene.image.labels[idx] = static_cast<int>(b.token);
        }
        if (maha <= limit) footprints[b.token].push_back({r, q});
      }
    }
    // Degenerate blobs still own the pixel under their centre.
    const int cr = std::clamp(static_cast<int>(std::lround(b.center_row)), 0, img.height - 1);
    const int cc = std::clamp(static_cast<int>(std::lround(b.center_col)), 0, img.width - 1);
    footprints[b.token].push_back({cr, cc});
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    scene.masks.push_back({i, CellSet(img, std::move(footprints[i]))});
  }
  return scene;
}

}  // namespace trajguide
