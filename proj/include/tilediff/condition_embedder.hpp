#pragma once

// Frozen, seeded stand-in for a self-supervised patch encoder. The interface is
// what matters: any encoder that maps a patch to a unit vector can replace it.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tilediff/error.hpp"
#include "tilediff/image.hpp"
#include "tilediff/params.hpp"
#include "tilediff/rng.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

inline constexpr const char* kNullTokenName = "null_token";

struct EmbedderConfig {
  std::size_t dim = 32;
  std::size_t window = 2;  // local pixel neighbourhood fed to the projection
  std::uint64_t seed = 0xe3bedd;
};

/// rows x cols unit-norm tokens, row-major: token (i, j) sits at index i*cols + j.
struct ConditionGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Tensor<float> tokens;  // [rows*cols, dim]

  std::size_t dim() const { return tokens.dim(1); }
  std::size_t count() const { return rows * cols; }
  std::span<const float> token(std::size_t i, std::size_t j) const {
    return tokens.data().subspan((i * cols + j) * dim(), dim());
  }
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors of different length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

class ConditionEmbedder {
 public:
  explicit ConditionEmbedder(EmbedderConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.dim == 0 || cfg_.window == 0) throw ConfigError("embedder dim and window must be positive");
    const std::size_t fan_in = cfg_.window * cfg_.window * 3;
    KeyedRng rng(cfg_.seed, 0xe3b);
    proj_.resize(cfg_.dim * fan_in);
    bias_.resize(cfg_.dim);
    const double gain = 2.0 / std::sqrt(double(fan_in));
    for (auto& w : proj_) w = gain * rng.normal();
    for (auto& b : bias_) b = 0.5 * rng.normal();
  }

  const EmbedderConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }

  /// Projects every window x window neighbourhood, applies tanh, mean-pools and
  /// L2-normalizes. Returns [dim].
  Tensor<float> embed_patch(const ImageTensor& img) const {
    require_image(img, "embed_patch input");
    const std::size_t h = img.dim(0), w = img.dim(1), k = cfg_.window;
    if (h < k || w < k) throw DimensionError("embed_patch: patch smaller than the embedding window");
    const std::size_t fan_in = k * k * 3;
    std::vector<double> acc(cfg_.dim, 0.0), v(fan_in);
    for (std::size_t y = 0; y + k <= h; ++y)
      for (std::size_t x = 0; x + k <= w; ++x) {
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            for (std::size_t c = 0; c < 3; ++c) v[(dy * k + dx) * 3 + c] = 2.0 * img.at(y + dy, x + dx, c) - 1.0;
        for (std::size_t o = 0; o < cfg_.dim; ++o) {
          double s = bias_[o];
          for (std::size_t i = 0; i < fan_in; ++i) s += proj_[o * fan_in + i] * v[i];
          acc[o] += std::tanh(s);
        }
      }
    double norm = 0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    Tensor<float> out({cfg_.dim});
    for (std::size_t o = 0; o < cfg_.dim; ++o) out[o] = norm > 0 ? float(acc[o] / norm) : 0.0f;
    if (norm == 0) out[0] = 1.0f;
    return out;
  }

  /// Splits the image into rows x cols equal tiles; tile (i, j) -> token (i, j).
  ConditionGrid embed_grid(const ImageTensor& img, std::size_t rows, std::size_t cols) const {
    require_image(img, "embed_grid input");
    if (rows == 0 || cols == 0 || img.dim(0) % rows || img.dim(1) % cols) {
      throw DimensionError("embed_grid: image " + shape_str(img.shape()) + " cannot be split into a " +
                           std::to_string(rows) + "x" + std::to_string(cols) + " grid");
    }
    const std::size_t th = img.dim(0) / rows, tw = img.dim(1) / cols;
    ConditionGrid g{rows, cols, Tensor<float>({rows * cols, cfg_.dim})};
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const auto e = embed_patch(crop_image(img, i * th, j * tw, th, tw));
        std::copy(e.data().begin(), e.data().end(), g.tokens.data().begin() + (i * cols + j) * cfg_.dim);
      }
    return g;
  }

 private:
  EmbedderConfig cfg_;
  std::vector<double> proj_;
  std::vector<double> bias_;
};

/// Initial value of the learned unconditional token: a seeded unit vector, [1, dim].
inline Tensor<float> init_null_token(std::size_t dim, std::uint64_t seed) {
  KeyedRng rng(seed, 0x0011);
  Tensor<float> t({1, dim});
  double n = 0;
  for (auto& v : t.data()) {
    v = float(rng.normal());
    n += double(v) * v;
  }
  for (auto& v : t.data()) v = float(v / std::sqrt(n));
  return t;
}

/// The learned unconditional token stored in a parameter set, [1, dim].
template <class T>
const Tensor<T>& null_condition(const ModelParams<T>& params) {
  return params.at(kNullTokenName);
}

}  // namespace tilediff
