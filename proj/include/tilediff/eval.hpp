#pragma once

// Distribution distances (Frechet, crop/full-image variants, KID), embedding
// similarity, SSIM, PSNR, Dice/IoU and k-NN balanced accuracy.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tilediff/condition_embedder.hpp"
#include "tilediff/error.hpp"
#include "tilediff/image.hpp"
#include "tilediff/latent_codec.hpp"
#include "tilediff/rng.hpp"

namespace tilediff {

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  std::string metric;
  double value = 0;
  nlohmann::json protocol = nlohmann::json::object();

  nlohmann::json to_json() const { return {{"metric", metric}, {"value", value}, {"protocol", protocol}}; }
};

// ---------------------------------------------------------------------------
// Features

/// Features for the FID family: the stand-in embedder under its own seed, so the
/// metric never shares weights with the conditioning path.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(EmbedderConfig cfg = {32, 2, 0xfea7u}) : emb_(cfg) {}
  std::string id() const {
    const auto& c = emb_.config();
    return "toy-embedder/d" + std::to_string(c.dim) + "/w" + std::to_string(c.window) + "/s" + std::to_string(c.seed);
  }
  std::size_t dim() const { return emb_.dim(); }
  Tensor<float> features(const std::vector<ImageTensor>& images) const {
    if (images.empty()) throw ConfigError("feature extraction needs at least one image");
    Tensor<float> f({images.size(), dim()});
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto e = emb_.embed_patch(images[i]);
      std::copy(e.data().begin(), e.data().end(), f.data().begin() + i * dim());
    }
    return f;
  }

 private:
  ConditionEmbedder emb_;
};

struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t n = 0;

  /// Mean and unbiased covariance of the rows of `feat` [n, d].
  static FeatureStats of(const Tensor<float>& feat) {
    if (feat.rank() != 2) throw DimensionError("FeatureStats: features must be [n, d]");
    const std::size_t n = feat.dim(0), d = feat.dim(1);
    if (n < 2) throw ConfigError("FeatureStats: need at least 2 samples, got " + std::to_string(n));
    Eigen::MatrixXd x(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) x(Eigen::Index(i), Eigen::Index(k)) = feat[i * d + k];
    FeatureStats s;
    s.n = n;
    s.mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - s.mu.transpose();
    s.sigma = (c.transpose() * c) / double(n - 1);
    s.sigma = 0.5 * (s.sigma + s.sigma.transpose());
    return s;
  }
};

namespace detail {

/// Symmetric PSD square root via eigendecomposition; small negative eigenvalues are clamped.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError(std::string(what) + ": eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-6) throw NumericError(std::string(what) + ": matrix is not PSD (eigenvalue " + std::to_string(ev(i)) + ")");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with eps_reg on both diagonals.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b, double eps_reg = 1e-6) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows()) {
    throw DimensionError("frechet_distance: feature dims " + std::to_string(a.mu.size()) + " and " + std::to_string(b.mu.size()));
  }
  if (!(eps_reg >= 0)) throw ConfigError("frechet_distance: eps_reg must be >= 0");
  const auto d = a.mu.size();
  const Eigen::MatrixXd sa = a.sigma + eps_reg * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sb = b.sigma + eps_reg * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd ra = detail::sqrt_psd(sa, "frechet_distance");
  Eigen::MatrixXd m = ra * sb * ra;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("frechet_distance: eigendecomposition failed");
  double tr_sqrt = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double l = es.eigenvalues()(i);
    if (l < -1e-6) throw NumericError("frechet_distance: product is not PSD (eigenvalue " + std::to_string(l) + ")");
    tr_sqrt += std::sqrt(std::max(l, 0.0));
  }
  const double v = (a.mu - b.mu).squaredNorm() + sa.trace() + sb.trace() - 2 * tr_sqrt;
  return std::max(v, 0.0);
}

inline double fid(const Tensor<float>& feat_a, const Tensor<float>& feat_b, double eps_reg = 1e-6) {
  return frechet_distance(FeatureStats::of(feat_a), FeatureStats::of(feat_b), eps_reg);
}

inline MetricReport full_image_fid(const std::vector<ImageTensor>& a, const std::vector<ImageTensor>& b,
                                   const FeatureExtractor& ex, double eps_reg = 1e-6) {
  MetricReport r{"full_image_fid", fid(ex.features(a), ex.features(b), eps_reg), {}};
  r.protocol = {{"n_a", a.size()}, {"n_b", b.size()}, {"extractor", ex.id()}, {"eps_reg", eps_reg}};
  return r;
}

/// Random crops of `big` (crop k comes from image k mod |big|) against whole `real` patches.
inline MetricReport crop_fid(const std::vector<ImageTensor>& big, const std::vector<ImageTensor>& real, std::size_t crop,
                             std::size_t n_crops, const FeatureExtractor& ex, std::uint64_t seed, double eps_reg = 1e-6) {
  if (big.empty()) throw ConfigError("crop_fid: no images");
  std::vector<ImageTensor> crops;
  for (std::size_t k = 0; k < n_crops; ++k) {
    const auto& img = big[k % big.size()];
    require_image(img);
    if (crop == 0 || crop > img.dim(0) || crop > img.dim(1)) {
      throw DimensionError("crop_fid: crop " + std::to_string(crop) + " larger than image " + shape_str(img.shape()));
    }
    KeyedRng rng(seed, 0xc209, k);
    const auto y = std::size_t(rng.integer(0, std::int64_t(img.dim(0) - crop)));
    const auto x = std::size_t(rng.integer(0, std::int64_t(img.dim(1) - crop)));
    crops.push_back(crop_image(img, y, x, crop, crop));
  }
  MetricReport r{"crop_fid", fid(ex.features(crops), ex.features(real), eps_reg), {}};
  r.protocol = {{"n_crops", n_crops}, {"crop", crop}, {"n_real", real.size()}, {"extractor", ex.id()},
                {"seed", seed},       {"eps_reg", eps_reg}};
  return r;
}

// ---------------------------------------------------------------------------
// KID

inline double poly_kernel(const float* x, const float* y, std::size_t d, int degree) {
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) s += double(x[k]) * y[k];
  return std::pow(s / double(d) + 1.0, degree);
}

/// Unbiased MMD^2 between two equally sized sets (rows).
inline double mmd2_unbiased(const Tensor<float>& a, const std::vector<std::size_t>& ia, const Tensor<float>& b,
                            const std::vector<std::size_t>& ib, int degree) {
  const std::size_t m = ia.size(), d = a.dim(1);
  double kxx = 0, kyy = 0, kxy = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i != j) {
        kxx += poly_kernel(&a[ia[i] * d], &a[ia[j] * d], d, degree);
        kyy += poly_kernel(&b[ib[i] * d], &b[ib[j] * d], d, degree);
      }
      kxy += poly_kernel(&a[ia[i] * d], &b[ib[j] * d], d, degree);
    }
  const double mm = double(m);
  return kxx / (mm * (mm - 1)) + kyy / (mm * (mm - 1)) - 2 * kxy / (mm * mm);
}

inline double kid(const Tensor<float>& a, const Tensor<float>& b, int degree = 3, std::size_t subset = 100,
                  std::size_t subsets = 10, std::uint64_t seed = 0) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw DimensionError("kid: feature sets must be [n, d] with equal d");
  if (subset < 2 || a.dim(0) < subset || b.dim(0) < subset) {
    throw ConfigError("kid: need at least " + std::to_string(subset) + " samples per set (have " + std::to_string(a.dim(0)) +
                      " and " + std::to_string(b.dim(0)) + ")");
  }
  if (subsets == 0) throw ConfigError("kid: subsets must be positive");
  double total = 0;
  for (std::size_t s = 0; s < subsets; ++s) {
    KeyedRng ra(seed, 0x41d, s, 0), rb(seed, 0x41d, s, 1);
    auto pa = ra.permutation(a.dim(0)), pb = rb.permutation(b.dim(0));
    pa.resize(subset);
    pb.resize(subset);
    total += mmd2_unbiased(a, pa, b, pb, degree);
  }
  return total / double(subsets);
}

// ---------------------------------------------------------------------------
// Pairwise image metrics

inline double embedding_similarity(const std::vector<ImageTensor>& real, const std::vector<ImageTensor>& synth,
                                   const ConditionEmbedder& ex) {
  if (real.size() != synth.size() || real.empty()) {
    throw DimensionError("embedding_similarity: sets must be paired 1:1 (" + std::to_string(real.size()) + " vs " +
                         std::to_string(synth.size()) + ")");
  }
  double s = 0;
  for (std::size_t i = 0; i < real.size(); ++i) s += cosine(ex.embed_patch(real[i]).data(), ex.embed_patch(synth[i]).data());
  return s / double(real.size());
}

/// Mean SSIM over all window x window positions (stride 1) and channels, dynamic range 1.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b, std::size_t window = 8, double k1 = 0.01,
                   double k2 = 0.03) {
  if (a.shape() != b.shape()) throw DimensionError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.rank() != 2 && a.rank() != 3) throw DimensionError("ssim: expected [H, W] or [H, W, C]");
  const std::size_t h = a.dim(0), w = a.dim(1), ch = a.rank() == 3 ? a.dim(2) : 1;
  if (window == 0 || window > h || window > w) throw DimensionError("ssim: window larger than image");
  const double c1 = k1 * k1, c2 = k2 * k2, n = double(window * window);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y + window <= h; ++y)
      for (std::size_t x = 0; x + window <= w; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t i = ((y + dy) * w + (x + dx)) * ch + c;
            const double va = a[i], vb = b[i];
            sa += va, sb += vb, saa += va * va, sbb += vb * vb, sab += va * vb;
          }
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / double(count);
}

inline constexpr double kPsnrSentinel = 100.0;

inline double psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  const double mse = se / double(a.size());
  if (mse == 0) return kPsnrSentinel;
  return 10 * std::log10(max_val * max_val / mse);
}

struct OverlapScores {
  double dice = 0;
  double iou = 0;
  double accuracy = 0;
};

inline OverlapScores dice_iou(const CellMask& pred, const CellMask& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("dice_iou: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const float p = pred[i], g = gt[i];
    if ((p != 0 && p != 1) || (g != 0 && g != 1)) throw ConfigError("dice_iou: masks must be binary");
    if (p == 1 && g == 1) ++tp;
    else if (p == 1) ++fp;
    else if (g == 1) ++fn;
    else ++tn;
  }
  OverlapScores s;
  s.accuracy = double(tp + tn) / double(pred.size());
  if (tp + fp + fn == 0) {
    s.dice = s.iou = 1.0;
  } else {
    s.dice = 2.0 * double(tp) / double(2 * tp + fp + fn);
    s.iou = double(tp) / double(tp + fp + fn);
  }
  return s;
}

/// k nearest train rows by cosine distance (ties by train index), majority vote
/// with ties to the smallest class; mean per-class recall over the test set.
inline double knn_balanced_accuracy(const Tensor<float>& train, const std::vector<int>& train_labels,
                                    const Tensor<float>& test, const std::vector<int>& test_labels, std::size_t k) {
  if (train.rank() != 2 || test.rank() != 2 || train.dim(1) != test.dim(1)) throw DimensionError("knn: embeddings must be [n, d] with equal d");
  if (train.dim(0) != train_labels.size() || test.dim(0) != test_labels.size()) throw DimensionError("knn: one label per row");
  if (k == 0 || k > train.dim(0)) throw ConfigError("knn: k must be in [1, train size]");
  std::set<int> classes(train_labels.begin(), train_labels.end());
  classes.insert(test_labels.begin(), test_labels.end());
  if (classes.size() < 2) throw ConfigError("knn: need at least two classes");
  std::map<int, std::size_t> support, hits;
  for (int c : test_labels) ++support[c];
  for (int c : classes)
    if (!support.count(c)) throw ConfigError("knn: empty class " + std::to_string(c) + " in the test set");
  const std::size_t n = train.dim(0), d = train.dim(1);
  const auto row = [d](const Tensor<float>& t, std::size_t i) { return t.data().subspan(i * d, d); };
  for (std::size_t q = 0; q < test.dim(0); ++q) {
    std::vector<std::pair<double, std::size_t>> dist(n);
    for (std::size_t i = 0; i < n; ++i) dist[i] = {1.0 - cosine(row(test, q), row(train, i)), i};
    std::stable_sort(dist.begin(), dist.end());
    std::map<int, std::size_t> votes;
    for (std::size_t j = 0; j < k; ++j) ++votes[train_labels[dist[j].second]];
    int best = votes.begin()->first;
    for (const auto& [c, v] : votes)
      if (v > votes[best]) best = c;  // map order: ties keep the smaller class
    if (best == test_labels[q]) ++hits[best];
  }
  double s = 0;
  for (const auto& [c, m] : support) s += double(hits[c]) / double(m);
  return s / double(support.size());
}

// ---------------------------------------------------------------------------
// Codec reconstruction

struct PsnrRow {
  std::size_t index = 0;
  double psnr = 0;
};

inline std::vector<PsnrRow> reconstruction_psnr_report(const std::vector<ImageTensor>& corpus, const LatentCodec& codec) {
  if (corpus.empty()) throw ConfigError("reconstruction_psnr_report: empty corpus");
  std::vector<PsnrRow> rows;
  for (std::size_t i = 0; i < corpus.size(); ++i) rows.push_back({i, psnr(corpus[i], codec.decode(codec.encode(corpus[i])))});
  return rows;
}

}  // namespace tilediff
