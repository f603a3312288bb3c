#pragma once

// Diffusion transformer over patchified latents. Each block runs adaLN-modulated
// self-attention, cross-attention from latent tokens to projected condition
// tokens, and an adaLN-modulated MLP. Timestep conditioning enters through the
// adaLN shift/scale/gate vectors, which start at zero.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tilediff/autodiff.hpp"
#include "tilediff/condition_embedder.hpp"
#include "tilediff/error.hpp"
#include "tilediff/ops.hpp"
#include "tilediff/params.hpp"
#include "tilediff/rng.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

struct BackboneConfig {
  std::size_t latent_channels = 12;
  std::size_t patch = 2;
  std::size_t hidden = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t cond_dim = 32;
  std::size_t mlp_ratio = 4;
  std::size_t freq_dim = 64;
  std::size_t max_tokens = 64;
  /// Side length, in latent tokens, of the region one condition token describes.
  std::size_t cond_token_span = 2;
  std::size_t timesteps = 1000;

  std::size_t token_dim() const { return patch * patch * latent_channels; }

  void validate() const {
    if (patch == 0 || hidden == 0 || depth == 0 || heads == 0 || cond_dim == 0 || latent_channels == 0)
      throw ConfigError("backbone dimensions must be positive");
    if (hidden % heads) throw ConfigError("hidden dim must be divisible by the head count");
    if (hidden % 4) throw ConfigError("hidden dim must be divisible by 4 for 2-D positional encodings");
    if (freq_dim % 2) throw ConfigError("timestep frequency dim must be even");
  }
};

/// Parameter count implied by a config (excluding ControlNet/LoRA extras).
inline std::size_t backbone_param_count(const BackboneConfig& c) {
  const std::size_t d = c.hidden, m = c.mlp_ratio * c.hidden, td = c.token_dim();
  const std::size_t lin_dd = d * d + d;
  std::size_t n = (td * d + d) + (c.freq_dim * d + d) + lin_dd + (c.cond_dim * d + d) + lin_dd + c.cond_dim;
  const std::size_t block = (6 * d * d + 6 * d) + 8 * lin_dd + (d * m + m) + (m * d + d);
  n += c.depth * block;
  n += (2 * d * d + 2 * d) + (td * d + td);
  return n;
}

// ---------------------------------------------------------------------------
// Token layout

/// [B, H, W, C] (or [H, W, C]) -> [B, (H/p)(W/p), p*p*C]; token r*(W/p)+c covers
/// latent rows [r p, (r+1) p) and columns [c p, (c+1) p), ordered (dy, dx, channel).
template <class T>
Tensor<T> patchify(const Tensor<T>& lat, std::size_t p) {
  const Tensor<T> x = lat.rank() == 3 ? lat.reshaped({1, lat.dim(0), lat.dim(1), lat.dim(2)}) : lat;
  if (x.rank() != 4) throw DimensionError("patchify: expected [B,H,W,C], got " + shape_str(lat.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (p == 0 || h % p || w % p) {
    throw DimensionError("patchify: latent " + shape_str(lat.shape()) + " not divisible by patch " + std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p, td = p * p * c;
  Tensor<T> out({b, gh * gw, td});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t q = 0; q < gw; ++q)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              out[((n * gh * gw) + r * gw + q) * td + (dy * p + dx) * c + ch] =
                  x[((n * h + r * p + dy) * w + q * p + dx) * c + ch];
  return out;
}

/// Inverse of patchify: [B, N, p*p*C] -> [B, H, W, C].
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t p, std::size_t h, std::size_t w, std::size_t c) {
  if (tokens.rank() != 3 || p == 0 || h % p || w % p || tokens.dim(1) != (h / p) * (w / p) || tokens.dim(2) != p * p * c) {
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match latent " +
                         std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  const std::size_t b = tokens.dim(0), gh = h / p, gw = w / p, td = p * p * c;
  Tensor<T> out({b, h, w, c});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t q = 0; q < gw; ++q)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              out[((n * h + r * p + dy) * w + q * p + dx) * c + ch] =
                  tokens[((n * gh * gw) + r * gw + q) * td + (dy * p + dx) * c + ch];
  return out;
}

/// 2-D sinusoidal encoding of (row, col) coordinates: the first half of the
/// features encodes the row, the second half the column. Returns [N, dim].
template <class T>
Tensor<T> sincos_2d(const std::vector<std::pair<double, double>>& coords, std::size_t dim) {
  if (dim % 4) throw ConfigError("sincos_2d: dim must be divisible by 4");
  const std::size_t quarter = dim / 4;
  Tensor<T> out({coords.size(), dim});
  for (std::size_t n = 0; n < coords.size(); ++n) {
    const double axes[2] = {coords[n].first, coords[n].second};
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = std::pow(10000.0, -double(k) / double(quarter));
        out[n * dim + a * 2 * quarter + k] = T(std::sin(axes[a] * omega));
        out[n * dim + a * 2 * quarter + quarter + k] = T(std::cos(axes[a] * omega));
      }
  }
  return out;
}

/// Positions of the gh x gw latent tokens, in token units.
template <class T>
Tensor<T> latent_positions(std::size_t gh, std::size_t gw, std::size_t dim) {
  std::vector<std::pair<double, double>> c;
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t q = 0; q < gw; ++q) c.emplace_back(double(r), double(q));
  return sincos_2d<T>(c, dim);
}

/// Condition token (i, j) is placed at the centre of the latent-token block it
/// describes, so it shares a coordinate frame with the latent tokens.
template <class T>
Tensor<T> condition_positions(std::size_t rows, std::size_t cols, std::size_t span, std::size_t dim) {
  std::vector<std::pair<double, double>> c;
  const double half = (double(span) - 1.0) / 2.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) c.emplace_back(double(i * span) + half, double(j * span) + half);
  return sincos_2d<T>(c, dim);
}

/// Sinusoidal features of a (possibly fractional) timestep: [cos(t w_k), sin(t w_k)].
template <class T>
Tensor<T> timestep_features(std::span<const double> t, std::size_t freq_dim) {
  const std::size_t half = freq_dim / 2;
  Tensor<T> out({t.size(), freq_dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::exp(-std::log(10000.0) * double(k) / double(half));
      out[b * freq_dim + k] = T(std::cos(t[b] * w));
      out[b * freq_dim + half + k] = T(std::sin(t[b] * w));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

template <class T>
Tensor<T> xavier(KeyedRng& rng, std::size_t out, std::size_t in) {
  const double bound = std::sqrt(6.0 / double(in + out));
  return rng.uniform_tensor<T>({out, in}, -bound, bound);
}

template <class T>
void add_linear(ModelParams<T>& p, KeyedRng& rng, const std::string& name, std::size_t out, std::size_t in, bool zero = false) {
  p.add(name + ".weight", zero ? Tensor<T>({out, in}) : xavier<T>(rng, out, in));
  p.add(name + ".bias", Tensor<T>({out}));
}

}  // namespace detail

template <class T = float>
ModelParams<T> init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  KeyedRng rng(seed, 0xd17);
  ModelParams<T> p;
  const std::size_t d = cfg.hidden;
  detail::add_linear(p, rng, "x_embed", d, cfg.token_dim());
  detail::add_linear(p, rng, "t_embed.fc1", d, cfg.freq_dim);
  detail::add_linear(p, rng, "t_embed.fc2", d, d);
  detail::add_linear(p, rng, "c_embed.fc1", d, cfg.cond_dim);
  detail::add_linear(p, rng, "c_embed.fc2", d, d);
  p.add(kNullTokenName, init_null_token(cfg.cond_dim, seed).template cast<T>());
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = "blocks." + std::to_string(i);
    detail::add_linear(p, rng, b + ".ada", 6 * d, d, /*zero=*/true);
    for (const char* a : {".self", ".cross"})
      for (const char* proj : {".q", ".k", ".v", ".o"}) detail::add_linear(p, rng, b + a + proj, d, d);
    detail::add_linear(p, rng, b + ".mlp.fc1", cfg.mlp_ratio * d, d);
    detail::add_linear(p, rng, b + ".mlp.fc2", d, cfg.mlp_ratio * d);
  }
  detail::add_linear(p, rng, "final.ada", 2 * d, d, true);
  detail::add_linear(p, rng, "final.linear", cfg.token_dim(), d, true);
  return p;
}

/// Tape-bound view of a parameter set. Frozen parameters become constants;
/// `override_fn` may replace a weight by an expression (LoRA-augmented weights).
template <class T>
class BoundParams {
 public:
  using Predicate = std::function<bool(const std::string&)>;
  using Override = std::function<std::optional<Var<T>>(Tape<T>&, const std::string&, Var<T>)>;

  BoundParams(Tape<T>& tape, const ModelParams<T>& params, Predicate trainable = {}, Override override_fn = {})
      : tape_(&tape) {
    for (const auto& [name, t] : params.tensors) {
      const bool train = trainable && trainable(name);
      Var<T> v = train ? tape.leaf(t) : tape.constant(t);
      leaves_.emplace(name, v);
      if (override_fn)
        if (auto o = override_fn(tape, name, v)) v = *o;
      vars_.emplace(name, v);
    }
  }

  Var<T> operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter '" + name + "' is not bound");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// The raw leaf for `name` (before overrides), e.g. to read its gradient.
  Var<T> leaf(const std::string& name) const { return leaves_.at(name); }
  const std::map<std::string, Var<T>>& leaves() const { return leaves_; }
  Tape<T>& tape() const { return *tape_; }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> leaves_;
  std::map<std::string, Var<T>> vars_;
};

// ---------------------------------------------------------------------------
// Forward

template <class T>
struct ControlInput {
  Tensor<T> mask_tokens;  // [B, N, (p*f)^2], mask pixels under each latent token
  double scale = 1.0;
};

template <class T>
struct BackboneInput {
  Tensor<T> latents;                // [B, H, W, C]
  std::vector<double> t;            // one (possibly fractional) timestep per sample
  Tensor<T> cond;                   // [B, rows*cols, cond_dim]
  std::size_t cond_rows = 0;
  std::size_t cond_cols = 0;
  std::vector<bool> drop_cond;      // true -> use the learned null token for that sample
  std::optional<ControlInput<T>> control;
};

namespace detail {

template <class T>
Var<T> lin(const BoundParams<T>& p, Var<T> x, const std::string& name) {
  return ad::linear(x, p[name + ".weight"], p[name + ".bias"]);
}

template <class T>
Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale) {
  return ad::add_per_batch(ad::mul_per_batch(x, ad::add_scalar(scale, 1.0)), shift);
}

template <class T>
Var<T> mha(const BoundParams<T>& p, const std::string& name, Var<T> x, Var<T> ctx, std::size_t heads) {
  const Var<T> q = lin(p, x, name + ".q");
  const Var<T> k = lin(p, ctx, name + ".k");
  const Var<T> v = lin(p, ctx, name + ".v");
  const double dh = double(q.shape().back()) / double(heads);
  return lin(p, ad::attention(q, k, v, 1.0 / std::sqrt(dh), heads), name + ".o");
}

}  // namespace detail

/// One transformer block. `mod_src` is SiLU(timestep embedding), [B, D].
template <class T>
Var<T> dit_block(const BackboneConfig& cfg, const BoundParams<T>& p, const std::string& name, Var<T> x, Var<T> mod_src,
                 Var<T> cond_h) {
  const std::size_t d = cfg.hidden;
  const Var<T> mod = detail::lin(p, mod_src, name + ".ada");
  auto chunk = [&](std::size_t i) { return ad::columns(mod, i * d, d); };
  Var<T> h = detail::modulate(ad::layer_norm(x), chunk(0), chunk(1));
  x = ad::add(x, ad::mul_per_batch(detail::mha(p, name + ".self", h, h, cfg.heads), chunk(2)));
  h = ad::layer_norm(x);
  x = ad::add(x, detail::mha(p, name + ".cross", h, cond_h, cfg.heads));
  h = detail::modulate(ad::layer_norm(x), chunk(3), chunk(4));
  h = detail::lin(p, ad::gelu(detail::lin(p, h, name + ".mlp.fc1")), name + ".mlp.fc2");
  return ad::add(x, ad::mul_per_batch(h, chunk(5)));
}

/// Timestep embedding: sinusoidal features through a 2-layer MLP. Returns [B, hidden].
template <class T>
Var<T> timestep_embedding(const BackboneConfig& cfg, const BoundParams<T>& p, std::span<const double> t) {
  for (double v : t)
    if (!(v >= 1.0 && v <= double(cfg.timesteps)))
      throw ConfigError("timestep " + std::to_string(v) + " outside [1, " + std::to_string(cfg.timesteps) + "]");
  Var<T> f = p.tape().constant(timestep_features<T>(t, cfg.freq_dim));
  return detail::lin(p, ad::silu(detail::lin(p, f, "t_embed.fc1")), "t_embed.fc2");
}

/// Predicted noise in token layout, [B, N, p*p*C].
template <class T>
Var<T> backbone_forward_tokens(const BackboneConfig& cfg, const BoundParams<T>& p, const BackboneInput<T>& in) {
  cfg.validate();
  Tape<T>& tape = p.tape();
  const auto& ls = in.latents.shape();
  if (ls.size() != 4 || ls[3] != cfg.latent_channels) {
    throw DimensionError("backbone: latents must be [B,H,W," + std::to_string(cfg.latent_channels) + "], got " + shape_str(ls));
  }
  const std::size_t batch = ls[0], gh = ls[1] / cfg.patch, gw = ls[2] / cfg.patch;
  if (in.t.size() != batch) throw DimensionError("backbone: need one timestep per batch element");
  if (gh * gw > cfg.max_tokens) throw DimensionError("backbone: " + std::to_string(gh * gw) + " tokens exceeds max_tokens");
  const std::size_t m = in.cond_rows * in.cond_cols;
  if (in.cond_rows * cfg.cond_token_span != gh || in.cond_cols * cfg.cond_token_span != gw) {
    throw StageError("stage contract: a " + std::to_string(gh) + "x" + std::to_string(gw) + " token latent needs a " +
                     std::to_string(gh / std::max<std::size_t>(cfg.cond_token_span, 1)) + "x" +
                     std::to_string(gw / std::max<std::size_t>(cfg.cond_token_span, 1)) + " condition grid, got " +
                     std::to_string(in.cond_rows) + "x" + std::to_string(in.cond_cols));
  }
  if (in.cond.rank() != 3 || in.cond.dim(0) != batch || in.cond.dim(1) != m || in.cond.dim(2) != cfg.cond_dim) {
    throw StageError("stage contract: condition tokens " + shape_str(in.cond.shape()) + " do not match batch " +
                     std::to_string(batch) + " x " + std::to_string(m) + " tokens x " + std::to_string(cfg.cond_dim));
  }

  Var<T> x = tape.constant(patchify(in.latents, cfg.patch));
  x = ad::add_trailing(detail::lin(p, x, "x_embed"), tape.constant(latent_positions<T>(gh, gw, cfg.hidden)));

  const Var<T> temb = timestep_embedding(cfg, p, in.t);
  const Var<T> mod_src = ad::silu(temb);

  std::vector<bool> drop = in.drop_cond.empty() ? std::vector<bool>(batch, false) : in.drop_cond;
  if (drop.size() != batch) throw DimensionError("backbone: drop_cond needs one flag per batch element");
  Var<T> c = ad::substitute_rows(tape.constant(in.cond), p[kNullTokenName], drop);
  c = detail::lin(p, ad::gelu(detail::lin(p, c, "c_embed.fc1")), "c_embed.fc2");
  c = ad::add_trailing(c, tape.constant(condition_positions<T>(in.cond_rows, in.cond_cols, cfg.cond_token_span, cfg.hidden)));

  std::optional<Var<T>> hc;
  if (in.control && in.control->scale != 0.0) {
    const auto& mt = in.control->mask_tokens;
    if (mt.rank() != 3 || mt.dim(0) != batch || mt.dim(1) != gh * gw) {
      throw DimensionError("control: mask tokens " + shape_str(mt.shape()) + " do not match the latent token grid");
    }
    hc = ad::add(x, detail::lin(p, tape.constant(mt), "control.mask_embed"));
  }

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string idx = std::to_string(i);
    x = dit_block(cfg, p, "blocks." + idx, x, mod_src, c);
    if (hc) {
      hc = dit_block(cfg, p, "control.blocks." + idx, *hc, mod_src, c);
      x = ad::add(x, ad::scale(detail::lin(p, *hc, "control.zero." + idx), in.control->scale));
    }
  }

  const Var<T> fmod = detail::lin(p, mod_src, "final.ada");
  x = detail::modulate(ad::layer_norm(x), ad::columns(fmod, 0, cfg.hidden), ad::columns(fmod, cfg.hidden, cfg.hidden));
  return detail::lin(p, x, "final.linear");
}

/// Convenience: frozen-parameter forward returning eps in latent layout [B,H,W,C].
template <class T>
Tensor<T> backbone_predict(const BackboneConfig& cfg, const ModelParams<T>& params, const BackboneInput<T>& in,
                           typename BoundParams<T>::Override override_fn = {}) {
  Tape<T> tape;
  BoundParams<T> p(tape, params, {}, std::move(override_fn));
  const Var<T> out = backbone_forward_tokens(cfg, p, in);
  const auto& ls = in.latents.shape();
  return unpatchify(out.value(), cfg.patch, ls[1], ls[2], ls[3]);
}

}  // namespace tilediff
