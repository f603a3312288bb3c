#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "tilediff/tensor.hpp"

namespace tilediff {

/// Counter-style keyed generator: the stream for (seed, key...) is a pure
/// function of its key, so unrelated consumers never perturb each other.
class KeyedRng {
 public:
  explicit KeyedRng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(a >> 32),
                      std::uint32_t(b),    std::uint32_t(b >> 32),    std::uint32_t(c), std::uint32_t(c >> 32)};
    engine_.seed(seq);
  }

  std::mt19937_64& engine() { return engine_; }

  double normal() { return normal_(engine_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  /// Integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  template <class T = float>
  Tensor<T> normal_tensor(Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = T(normal());
    return t;
  }

  template <class T = float>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = T(lo + (hi - lo) * uniform());
    return t;
  }

  /// Random permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[std::size_t(integer(0, std::int64_t(i - 1)))]);
    return p;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace tilediff
