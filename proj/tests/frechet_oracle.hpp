#pragma once

// Independent Frechet oracle: cyclic Jacobi eigenvalues on plain nested
// vectors, kept apart from Eigen on purpose.

#include <cmath>
#include <vector>

#include "tilediff/eval.hpp"

namespace tilediff::testing {

struct Jacobi {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;  // columns
};

inline Jacobi jacobi(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  Jacobi r;
  for (std::size_t i = 0; i < n; ++i) r.values.push_back(a[i][i]);
  r.vectors = v;
  return r;
}

using Mat = std::vector<std::vector<double>>;

inline Mat mul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size();
  Mat c(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat sqrtm(const Mat& a) {
  const auto e = jacobi(a);
  const std::size_t n = a.size();
  Mat r(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) r[i][j] += e.vectors[i][k] * std::sqrt(std::max(e.values[k], 0.0)) * e.vectors[j][k];
  return r;
}

inline double oracle_frechet(const std::vector<double>& ma, const Mat& sa, const std::vector<double>& mb, const Mat& sb) {
  const Mat ra = sqrtm(sa);
  const auto e = jacobi(mul(mul(ra, sb), ra));
  double v = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) v += (ma[i] - mb[i]) * (ma[i] - mb[i]) + sa[i][i] + sb[i][i];
  for (double l : e.values) v -= 2 * std::sqrt(std::max(l, 0.0));
  return v;
}

inline FeatureStats stats_of(const std::vector<double>& mu, const Mat& s) {
  FeatureStats f;
  const auto d = Eigen::Index(mu.size());
  f.mu.resize(d);
  f.sigma.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    f.mu(i) = mu[std::size_t(i)];
    for (Eigen::Index j = 0; j < d; ++j) f.sigma(i, j) = s[std::size_t(i)][std::size_t(j)];
  }
  f.n = 100;
  return f;
}

inline Mat random_psd(std::size_t d, std::uint64_t seed) {
  KeyedRng rng(seed);
  Mat g(d, std::vector<double>(d));
  for (auto& r : g)
    for (auto& x : r) x = rng.normal();
  Mat s(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) s[i][j] += g[i][k] * g[j][k] / double(d);
  return s;
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
inline Mat random_rotation(std::size_t d, std::uint64_t seed) {
  KeyedRng rng(seed, 0x2070);
  Mat q(d, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * q[i][k];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * q[i][k];
    }
    double n = 0;
    for (double x : v) n += x * x;
    for (std::size_t i = 0; i < d; ++i) q[i][j] = v[i] / std::sqrt(n);
  }
  return q;
}

inline Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline std::vector<double> mat_vec(const Mat& a, const std::vector<double>& v) {
  std::vector<double> r(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) r[i] += a[i][j] * v[j];
  return r;
}

}  // namespace tilediff::testing
