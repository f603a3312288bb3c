#pragma once

// Finite-difference oracle used by the gradient suites. Everything runs in
// double: central differences at h = 1e-3 are only trustworthy to ~1e-4
// relative error when the forward pass itself carries more than float32 digits.

#include <cmath>
#include <functional>
#include <vector>

#include "tilediff/autodiff.hpp"
#include "tilediff/ops.hpp"
#include "tilediff/rng.hpp"

namespace tilediff::testing {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradReport {
  std::vector<double> rel_error;  // per input, ||g_ad - g_fd|| / ||g_fd||
  double worst() const {
    double w = 0;
    for (double e : rel_error) w = std::max(w, e);
    return w;
  }
};

/// Scalarizes a non-scalar output by a fixed random projection so the check
/// covers a full vector-Jacobian product rather than a plain sum.
inline Var<double> scalarize(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  if (y.value().size() == 1) return y;
  KeyedRng rng(seed, 0x5ca1);
  auto w = rng.normal_tensor<double>(y.shape());
  return ad::sum(ad::mul(y, tape.constant(w)));
}

inline double eval_scalar(const Fn& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return scalarize(tape, f(tape, vars), seed).value()[0];
}

inline GradReport gradcheck(const Fn& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed = 7,
                            double h = 1e-3, const std::vector<bool>& check = {}) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  auto loss = scalarize(tape, f(tape, vars), seed);
  tape.backward(loss);

  GradReport rep;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!check.empty() && !check[k]) {
      rep.rel_error.push_back(0.0);
      continue;
    }
    const auto g_ad = tape.gradient(vars[k]);
    auto probe = inputs;
    double diff2 = 0, ref2 = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = eval_scalar(f, probe, seed);
      probe[k][i] = x0 - h;
      const double fm = eval_scalar(f, probe, seed);
      probe[k][i] = x0;
      const double g_fd = (fp - fm) / (2 * h);
      diff2 += (g_ad[i] - g_fd) * (g_ad[i] - g_fd);
      ref2 += g_fd * g_fd;
    }
    rep.rel_error.push_back(ref2 > 0 ? std::sqrt(diff2 / ref2) : std::sqrt(diff2));
  }
  return rep;
}

inline Tensor<double> uniform(Shape s, std::uint64_t seed, std::uint64_t stream = 0) {
  KeyedRng rng(seed, stream);
  return rng.uniform_tensor<double>(std::move(s), -1.0, 1.0);
}

}  // namespace tilediff::testing
