#pragma once

// Invertible linear stand-in for a pretrained image VAE: space-to-depth by a
// factor f followed by a fixed orthogonal mixing of the 3*f*f channels.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tilediff/error.hpp"
#include "tilediff/image.hpp"
#include "tilediff/rng.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

using LatentTensor = Tensor<float>;  // [H/f, W/f, 3 f^2]

struct CodecConfig {
  std::size_t factor = 2;
  std::uint64_t seed = 0x5eedc0dec;

  std::size_t channels() const { return 3 * factor * factor; }
};

class LatentCodec {
 public:
  explicit LatentCodec(CodecConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.factor == 0) throw ConfigError("codec factor must be positive");
    const auto n = static_cast<Eigen::Index>(cfg_.channels());
    KeyedRng rng(cfg_.seed, 0xc0dec);
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < n; ++c) g(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    // Fix column signs so Q is a deterministic function of the seed.
    for (Eigen::Index c = 0; c < n; ++c)
      if (r(c, c) < 0) q.col(c) *= -1.0;
    mix_.resize(std::size_t(n * n));
    for (Eigen::Index r2 = 0; r2 < n; ++r2)
      for (Eigen::Index c = 0; c < n; ++c) mix_[std::size_t(r2 * n + c)] = q(r2, c);
  }

  const CodecConfig& config() const { return cfg_; }

  /// Row-major mixing matrix Q (channels x channels).
  const std::vector<double>& mixing() const { return mix_; }

  LatentTensor encode(const ImageTensor& img) const {
    require_image(img);
    const std::size_t f = cfg_.factor, h = img.dim(0), w = img.dim(1), c = cfg_.channels();
    if (h % f || w % f) {
      throw DimensionError("encode: image " + shape_str(img.shape()) + " must have height and width divisible by " +
                           std::to_string(f));
    }
    LatentTensor lat({h / f, w / f, c});
    std::vector<double> v(c);
    for (std::size_t i = 0; i < h / f; ++i)
      for (std::size_t j = 0; j < w / f; ++j) {
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx)
            for (std::size_t ch = 0; ch < 3; ++ch) v[(dy * f + dx) * 3 + ch] = img.at(i * f + dy, j * f + dx, ch);
        float* out = &lat.at(i, j, 0);
        for (std::size_t r = 0; r < c; ++r) {
          double s = 0;
          for (std::size_t k = 0; k < c; ++k) s += mix_[r * c + k] * v[k];
          out[r] = float(s);
        }
      }
    return lat;
  }

  ImageTensor decode(const LatentTensor& lat) const {
    const std::size_t f = cfg_.factor, c = cfg_.channels();
    if (lat.rank() != 3 || lat.dim(2) != c) {
      throw DimensionError("decode: latent " + shape_str(lat.shape()) + " needs " + std::to_string(c) + " channels");
    }
    const std::size_t lh = lat.dim(0), lw = lat.dim(1);
    ImageTensor img({lh * f, lw * f, 3});
    std::vector<double> v(c);
    for (std::size_t i = 0; i < lh; ++i)
      for (std::size_t j = 0; j < lw; ++j) {
        const float* z = &lat.at(i, j, 0);
        for (std::size_t k = 0; k < c; ++k) {
          double s = 0;
          for (std::size_t r = 0; r < c; ++r) s += mix_[r * c + k] * z[r];
          v[k] = s;
        }
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx)
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(i * f + dy, j * f + dx, ch) = float(v[(dy * f + dx) * 3 + ch]);
      }
    return img;
  }

 private:
  CodecConfig cfg_;
  std::vector<double> mix_;
};

/// Standard deviation of all latent entries; the run config stores 1/std as the
/// scale that brings latents to unit variance before diffusion.
inline double latent_std(const std::vector<LatentTensor>& latents) {
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (const auto& l : latents)
    for (float v : l.data()) {
      s += v;
      s2 += double(v) * v;
      ++n;
    }
  if (n < 2) throw ConfigError("latent_std needs at least two values");
  const double mu = s / double(n);
  return std::sqrt(std::max(s2 / double(n) - mu * mu, 1e-12));
}

}  // namespace tilediff
