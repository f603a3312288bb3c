#pragma once

// ControlNet branch (trainable block copies joined to the frozen base through
// zero-initialized linears) and LoRA low-rank weight deltas.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tilediff/backbone.hpp"
#include "tilediff/checkpoint.hpp"
#include "tilediff/error.hpp"
#include "tilediff/image.hpp"
#include "tilediff/ops.hpp"
#include "tilediff/params.hpp"
#include "tilediff/rng.hpp"

namespace tilediff {

// ---------------------------------------------------------------------------
// ControlNet

inline constexpr const char* kControlPrefix = "control.";

/// Width of one mask token: the (patch * codec_factor)^2 mask pixels under a latent token.
inline std::size_t mask_token_dim(const BackboneConfig& cfg, std::size_t codec_factor) {
  const std::size_t s = cfg.patch * codec_factor;
  return s * s;
}

/// Adds "control.*" parameters: a copy of every base block, a mask encoder and
/// one zero-initialized output linear per block.
inline void attach_control_branch(ModelParams<float>& params, const BackboneConfig& cfg, std::size_t codec_factor,
                                  std::uint64_t seed) {
  KeyedRng rng(seed, 0xc7a1);
  std::vector<std::pair<std::string, Tensor<float>>> copies;
  for (const auto& [name, t] : params.tensors)
    if (name.rfind("blocks.", 0) == 0) copies.emplace_back(kControlPrefix + name, t);
  for (auto& [name, t] : copies) params.add(name, std::move(t));
  detail::add_linear(params, rng, "control.mask_embed", cfg.hidden, mask_token_dim(cfg, codec_factor));
  for (std::size_t i = 0; i < cfg.depth; ++i)
    detail::add_linear(params, rng, "control.zero." + std::to_string(i), cfg.hidden, cfg.hidden, /*zero=*/true);
}

inline bool is_control_param(const std::string& name) { return name.rfind(kControlPrefix, 0) == 0; }

/// Mask [H, W] -> tokens [N, (p f)^2], aligned with patchify(encode(image)).
inline Tensor<float> mask_tokens(const CellMask& mask, const BackboneConfig& cfg, std::size_t codec_factor) {
  require_mask(mask);
  const std::size_t s = cfg.patch * codec_factor;
  if (mask.dim(0) % s || mask.dim(1) % s) {
    throw DimensionError("mask " + shape_str(mask.shape()) + " not divisible into " + std::to_string(s) + "px tokens");
  }
  const std::size_t gh = mask.dim(0) / s, gw = mask.dim(1) / s;
  Tensor<float> out({gh * gw, s * s});
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c)
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx) out[(r * gw + c) * s * s + dy * s + dx] = mask.at(r * s + dy, c * s + dx);
  return out;
}

/// ControlNet-augmented noise prediction, latent layout [B,H,W,C]. Masks must
/// cover the image the latents decode to (latent size x codec factor).
inline Tensor<float> control_forward(const BackboneConfig& cfg, const ModelParams<float>& params,
                                     BackboneInput<float> in, const std::vector<CellMask>& masks,
                                     std::size_t codec_factor, double control_scale) {
  const std::size_t batch = in.latents.dim(0), h = in.latents.dim(1), w = in.latents.dim(2);
  if (masks.size() != batch) throw DimensionError("control_forward: need one mask per batch element");
  const std::size_t mtd = mask_token_dim(cfg, codec_factor);
  Tensor<float> tokens({batch, (h / cfg.patch) * (w / cfg.patch), mtd});
  for (std::size_t b = 0; b < batch; ++b) {
    if (masks[b].rank() != 2 || masks[b].dim(0) != h * codec_factor || masks[b].dim(1) != w * codec_factor) {
      throw DimensionError("control_forward: mask " + shape_str(masks[b].shape()) + " does not match a " +
                           std::to_string(h * codec_factor) + "x" + std::to_string(w * codec_factor) + " image");
    }
    const auto mt = mask_tokens(masks[b], cfg, codec_factor);
    std::copy(mt.data().begin(), mt.data().end(), tokens.data().begin() + b * mt.size());
  }
  in.control = ControlInput<float>{std::move(tokens), control_scale};
  return backbone_predict(cfg, params, in);
}

// ---------------------------------------------------------------------------
// LoRA

/// Low-rank delta for one weight W[d, k]: W + (alpha / r) B A, A[r, k], B[d, r].
struct LoraAdapter {
  std::string target;
  Tensor<float> a;
  Tensor<float> b;
  std::size_t rank = 4;
  double alpha = 4.0;

  double scaling() const { return alpha / double(rank); }
};

inline void check_lora(const Tensor<float>& w, const LoraAdapter& ad) {
  if (w.rank() != 2) throw DimensionError("LoRA target " + ad.target + " must be a matrix");
  const std::size_t d = w.dim(0), k = w.dim(1);
  if (ad.rank == 0 || ad.rank > std::min(d, k)) {
    throw ConfigError("LoRA rank " + std::to_string(ad.rank) + " exceeds min(d, k) = " + std::to_string(std::min(d, k)));
  }
  if (ad.a.shape() != Shape{ad.rank, k} || ad.b.shape() != Shape{d, ad.rank}) {
    throw DimensionError("LoRA factors " + shape_str(ad.a.shape()) + "/" + shape_str(ad.b.shape()) +
                         " do not conform to " + shape_str(w.shape()));
  }
}

/// W_effective = W + (alpha / r) B A; W itself is not modified.
inline Tensor<float> lora_apply(const Tensor<float>& w, const LoraAdapter& ad) {
  check_lora(w, ad);
  const std::size_t d = w.dim(0), k = w.dim(1), r = ad.rank;
  Tensor<float> out = w;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t q = 0; q < r; ++q) s += double(ad.b[i * r + q]) * ad.a[q * k + j];
      out[i * k + j] = float(double(out[i * k + j]) + ad.scaling() * s);
    }
  return out;
}

struct LoraSet {
  std::vector<LoraAdapter> adapters;
  std::string base_hash;  // content hash of the base weights these deltas apply to

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& a : adapters) n += a.a.size() + a.b.size();
    return n;
  }
};

/// Weights the default LoRA setup targets: q/k/v/o of self- and cross-attention.
inline std::vector<std::string> default_lora_targets(const BackboneConfig& cfg) {
  std::vector<std::string> t;
  for (std::size_t i = 0; i < cfg.depth; ++i)
    for (const char* a : {"self", "cross"})
      for (const char* p : {"q", "k", "v", "o"})
        t.push_back("blocks." + std::to_string(i) + "." + a + "." + p + ".weight");
  return t;
}

/// A ~ U(+-1/sqrt(k)), B = 0, so the set starts as an exact identity.
inline LoraSet init_lora(const ModelParams<float>& base, const std::vector<std::string>& targets, std::size_t rank,
                         double alpha, std::uint64_t seed) {
  LoraSet set;
  set.base_hash = content_hash(base);
  KeyedRng rng(seed, 0x10ba);
  for (const auto& name : targets) {
    const auto& w = base.at(name);
    LoraAdapter ad{name, Tensor<float>(), Tensor<float>({w.dim(0), rank}), rank, alpha};
    const double bound = 1.0 / std::sqrt(double(w.dim(1)));
    ad.a = rng.uniform_tensor<float>({rank, w.dim(1)}, -bound, bound);
    check_lora(w, ad);
    set.adapters.push_back(std::move(ad));
  }
  return set;
}

/// Binds LoRA factors on a tape and produces the BoundParams override that swaps
/// each target weight for W + s B A. Factor leaves stay reachable for gradients.
class LoraBinding {
 public:
  LoraBinding(LoraSet& set, bool trainable) : set_(&set), trainable_(trainable) {}

  BoundParams<float>::Override override_fn() {
    return [this](Tape<float>& tape, const std::string& name, Var<float> w) -> std::optional<Var<float>> {
      for (std::size_t i = 0; i < set_->adapters.size(); ++i) {
        auto& ad = set_->adapters[i];
        if (ad.target != name) continue;
        check_lora(w.value(), ad);
        Var<float> a = trainable_ ? tape.leaf(ad.a) : tape.constant(ad.a);
        Var<float> b = trainable_ ? tape.leaf(ad.b) : tape.constant(ad.b);
        vars_[i] = {a, b};
        return ad::add(w, ad::scale(ad::matmul(b, a), ad.scaling()));
      }
      return std::nullopt;
    };
  }

  /// (A, B) leaves for adapter i, available after binding.
  std::pair<Var<float>, Var<float>> factors(std::size_t i) const { return vars_.at(i); }
  LoraSet& set() { return *set_; }

 private:
  LoraSet* set_;
  bool trainable_;
  std::map<std::size_t, std::pair<Var<float>, Var<float>>> vars_;
};

inline BoundParams<float>::Override frozen_lora_override(const LoraSet& set) {
  return [&set](Tape<float>& tape, const std::string& name, Var<float> w) -> std::optional<Var<float>> {
    for (const auto& ad : set.adapters)
      if (ad.target == name) return tape.constant(lora_apply(w.value(), ad));
    return std::nullopt;
  };
}

// Adapter files reference the base weights by content hash.

inline Checkpoint lora_to_checkpoint(const LoraSet& set) {
  Checkpoint ck;
  json targets = json::array();
  for (const auto& ad : set.adapters) {
    targets.push_back({{"target", ad.target}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    ck.params.add("lora." + ad.target + ".A", ad.a);
    ck.params.add("lora." + ad.target + ".B", ad.b);
  }
  ck.header = {{"kind", "lora"}, {"base_hash", set.base_hash}, {"targets", targets}};
  return ck;
}

inline LoraSet lora_from_checkpoint(const Checkpoint& ck, const ModelParams<float>& base) {
  if (ck.header.value("kind", "") != "lora") throw IoError("not a LoRA adapter file");
  LoraSet set;
  set.base_hash = ck.header.at("base_hash").get<std::string>();
  const auto actual = content_hash(base);
  if (set.base_hash != actual) {
    throw StageError("LoRA adapter was trained on base " + set.base_hash.substr(0, 12) + " but the loaded base is " +
                     actual.substr(0, 12));
  }
  for (const auto& t : ck.header.at("targets")) {
    LoraAdapter ad;
    ad.target = t.at("target").get<std::string>();
    ad.rank = t.at("rank").get<std::size_t>();
    ad.alpha = t.at("alpha").get<double>();
    ad.a = ck.params.at("lora." + ad.target + ".A");
    ad.b = ck.params.at("lora." + ad.target + ".B");
    check_lora(base.at(ad.target), ad);
    set.adapters.push_back(std::move(ad));
  }
  return set;
}

}  // namespace tilediff
