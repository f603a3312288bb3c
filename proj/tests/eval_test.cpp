#include <gtest/gtest.h>

#include <cmath>

#include "tilediff/data_ingest.hpp"
#include "frechet_oracle.hpp"
#include "tilediff/eval.hpp"

using namespace tilediff;
using namespace tilediff::testing;

namespace {

std::vector<ImageTensor> toy_images(std::size_t n, std::uint64_t seed, const std::string& gen = "textures") {
  return make_toy_corpus({gen, n, 32, seed}).images;
}

}  // namespace

TEST(Frechet, OneDimensionalClosedForms) {
  // equal means, variances 1 and 4: (1 - 2)^2 = 1
  EXPECT_NEAR(frechet_distance(stats_of({0}, {{1}}), stats_of({0}, {{4}}), 0.0), 1.0, 1e-8);
  // shifted means, equal variance: 3^2 = 9
  EXPECT_NEAR(frechet_distance(stats_of({1}, {{2}}), stats_of({4}, {{2}}), 0.0), 9.0, 1e-8);
  // both: 0.5^2 + (sqrt(0.25) - sqrt(9))^2
  EXPECT_NEAR(frechet_distance(stats_of({0.5}, {{0.25}}), stats_of({0}, {{9}}), 0.0), 0.25 + 6.25, 1e-8);
}

TEST(Frechet, MatchesJacobiOracle) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const std::size_t d = 6;
    const Mat sa = random_psd(d, seed), sb = random_psd(d, seed + 100);
    KeyedRng rng(seed, 7);
    std::vector<double> ma(d), mb(d);
    for (auto& x : ma) x = rng.normal();
    for (auto& x : mb) x = rng.normal();
    const double want = oracle_frechet(ma, sa, mb, sb);
    const double got = frechet_distance(stats_of(ma, sa), stats_of(mb, sb), 0.0);
    EXPECT_NEAR(got, want, 1e-8 * std::max(1.0, want)) << "seed " << seed;
  }
}

TEST(Frechet, ThreeDimensionalOracleAndRotationInvariance) {
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    const Mat sa = random_psd(3, seed), sb = random_psd(3, seed + 500);
    KeyedRng rng(seed, 8);
    std::vector<double> ma(3), mb(3);
    for (auto& x : ma) x = rng.normal();
    for (auto& x : mb) x = rng.normal();
    const double got = frechet_distance(stats_of(ma, sa), stats_of(mb, sb), 0.0);
    EXPECT_NEAR(got, oracle_frechet(ma, sa, mb, sb), 1e-6) << "seed " << seed;
    const Mat q = random_rotation(3, seed), qt = transpose(q);
    const double rot = frechet_distance(stats_of(mat_vec(q, ma), mul(mul(q, sa), qt)), stats_of(mat_vec(q, mb), mul(mul(q, sb), qt)), 0.0);
    EXPECT_NEAR(rot, got, 1e-6) << "seed " << seed;
  }
}

TEST(Frechet, IdenticalStatsAreZeroAndNonPsdThrows) {
  const Mat s = random_psd(5, 3);
  EXPECT_NEAR(frechet_distance(stats_of({0, 1, 2, 3, 4}, s), stats_of({0, 1, 2, 3, 4}, s)), 0.0, 1e-6);
  Mat bad = {{1, 0}, {0, -1}};
  EXPECT_THROW(frechet_distance(stats_of({0, 0}, bad), stats_of({0, 0}, {{1, 0}, {0, 1}}), 0.0), NumericError);
  EXPECT_THROW(frechet_distance(stats_of({0}, {{1}}), stats_of({0, 0}, {{1, 0}, {0, 1}})), DimensionError);
}

TEST(Frechet, CovarianceIsUnbiased) {
  Tensor<float> f({4, 1}, {1, 2, 3, 4});
  const auto s = FeatureStats::of(f);
  EXPECT_NEAR(s.mu(0), 2.5, 1e-12);
  EXPECT_NEAR(s.sigma(0, 0), 5.0 / 3.0, 1e-12);
}

TEST(CropFid, FullSizeCropEqualsPlainFid) {
  const FeatureExtractor ex;
  const auto a = toy_images(24, 1), b = toy_images(24, 2);
  const auto full = full_image_fid(a, b, ex);
  const auto crop = crop_fid(a, b, 32, a.size(), ex, 9);
  EXPECT_EQ(full.value, crop.value);
  EXPECT_EQ(crop.protocol["crop"], 32);
  EXPECT_THROW(crop_fid(a, b, 33, 4, ex, 9), DimensionError);
}

TEST(CropFid, SameDistributionScoresBelowDifferentDistribution) {
  const FeatureExtractor ex;
  const auto a = toy_images(64, 1), b = toy_images(64, 2);
  const auto c = make_toy_corpus({"two-domain", 64, 32, 3}).images_b;
  EXPECT_LT(full_image_fid(a, b, ex).value, full_image_fid(a, c, ex).value);
}

TEST(CropFid, SameDistributionCalibrationAndDeterminism) {
  const FeatureExtractor ex;
  const auto big = make_toy_corpus({"textures", 500, 64, 3}).images, other = make_toy_corpus({"textures", 500, 64, 4}).images;
  std::vector<ImageTensor> real;
  KeyedRng rng(5);
  for (std::size_t k = 0; k < 2000; ++k)
    real.push_back(crop_image(other[k % 500], std::size_t(rng.integer(0, 32)), std::size_t(rng.integer(0, 32)), 32, 32));
  const auto v = crop_fid(big, real, 32, 2000, ex, 7);
  EXPECT_LT(v.value, 0.5);  // measured 4e-4
  EXPECT_EQ(v.value, crop_fid(big, real, 32, 2000, ex, 7).value);
}

TEST(FullFid, IdenticalSetsAndDisjointHalves) {
  const FeatureExtractor ex;
  const auto a = toy_images(400, 11);
  EXPECT_NEAR(full_image_fid(a, a, ex).value, 0.0, 1e-6);
  const std::vector<ImageTensor> h1(a.begin(), a.begin() + 200), h2(a.begin() + 200, a.end());
  const double halves = full_image_fid(h1, h2, ex).value;
  EXPECT_GT(halves, 0.0);
  EXPECT_LT(halves, 0.5);
}

TEST(Kid, UnitShiftMatchesBruteForceDoubleSum) {
  KeyedRng rng(21);
  Tensor<float> a({50, 1}), b({50, 1});
  for (std::size_t i = 0; i < 50; ++i) a[i] = float(rng.normal()), b[i] = float(rng.normal() + 1.0);
  const auto k = [](double x, double y) { return std::pow(x * y + 1, 3); };
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 50; ++j) {
      if (i != j) xx += k(a[i], a[j]), yy += k(b[i], b[j]);
      xy += k(a[i], b[j]);
    }
  const double want = xx / (50.0 * 49) + yy / (50.0 * 49) - 2 * xy / (50.0 * 50);
  const double got = kid(a, b, 3, 50, 1, 0);  // a full-size subset is the whole set in some order
  EXPECT_NEAR(got, want, 1e-8);
  EXPECT_GT(got, 0.0);
}

TEST(Kid, LargeSampleCalibration) {
  const FeatureExtractor ex;
  const auto fa = ex.features(toy_images(5000, 1)), fb = ex.features(toy_images(5000, 2));
  EXPECT_LT(std::abs(kid(fa, fb, 3, 1000, 10, 1)), 1e-3);  // measured -1.5e-5
}

TEST(EmbeddingSimilarity, IdenticalAndOrthogonal) {
  const ConditionEmbedder emb;
  const auto a = toy_images(5, 12);
  EXPECT_NEAR(embedding_similarity(a, a, emb), 1.0, 1e-6);
  const std::vector<float> x = {1, 0, 0}, y = {0, 1, 0};
  EXPECT_EQ(cosine(x, y), 0.0);
  EXPECT_THROW(embedding_similarity(a, toy_images(4, 12), emb), DimensionError);
}

TEST(Kid, MatchesHandComputedEstimator) {
  // d=1, two samples per set: k(x,y) = (xy + 1)^3
  Tensor<float> a({2, 1}, {0, 1}), b({2, 1}, {1, 2});
  const auto k = [](double x, double y) { return std::pow(x * y + 1, 3); };
  const double kxx = 2 * k(0, 1) / 2, kyy = 2 * k(1, 2) / 2;
  const double kxy = (k(0, 1) + k(0, 2) + k(1, 1) + k(1, 2)) / 4;
  EXPECT_NEAR(kid(a, b, 3, 2, 1, 0), kxx + kyy - 2 * kxy, 1e-9);
  EXPECT_THROW(kid(a, b, 3, 3, 1, 0), ConfigError);
}

TEST(Kid, SameDistributionNearZero) {
  const FeatureExtractor ex;
  const auto fa = ex.features(toy_images(60, 1)), fb = ex.features(toy_images(60, 2));
  const auto fc = ex.features(make_toy_corpus({"two-domain", 60, 32, 3}).images_b);
  const double same = kid(fa, fb, 3, 50, 5, 1), diff = kid(fa, fc, 3, 50, 5, 1);
  EXPECT_LT(std::abs(same), diff);
}

TEST(Ssim, IdenticalAndConstantCases) {
  const auto a = toy_images(1, 4)[0];
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  Tensor<float> z({8, 8, 3}, 0.0f), o({8, 8, 3}, 1.0f);
  const double c1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(z, o), c1 / (1 + c1), 1e-12);
  EXPECT_THROW(ssim(a, z), DimensionError);
}

TEST(Psnr, KnownMseAndSentinel) {
  Tensor<float> a({4, 4, 3}, 0.5f), b({4, 4, 3}, 0.6f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_EQ(psnr(a, a), kPsnrSentinel);
}

TEST(DiceIou, HandCasesAndErrors) {
  CellMask p({2, 2}, {1, 1, 0, 0}), g({2, 2}, {1, 0, 1, 0});
  const auto s = dice_iou(p, g);
  EXPECT_DOUBLE_EQ(s.dice, 0.5);
  EXPECT_DOUBLE_EQ(s.iou, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.accuracy, 0.5);
  CellMask e({2, 2}, 0.0f);
  EXPECT_DOUBLE_EQ(dice_iou(e, e).dice, 1.0);
  EXPECT_DOUBLE_EQ(dice_iou(e, e).iou, 1.0);
  CellMask same({2, 2}, {1, 0, 1, 1});
  const auto id = dice_iou(same, same);
  EXPECT_EQ(id.dice, 1.0);
  EXPECT_EQ(id.iou, 1.0);
  EXPECT_EQ(id.accuracy, 1.0);
  CellMask left({2, 2}, {1, 0, 1, 0}), right({2, 2}, {0, 1, 0, 1});
  EXPECT_EQ(dice_iou(left, right).dice, 0.0);
  EXPECT_EQ(dice_iou(left, right).iou, 0.0);
  CellMask bad({2, 2}, 0.5f);
  EXPECT_THROW(dice_iou(bad, e), ConfigError);
}

TEST(DiceIou, ExhaustiveTwoByTwoEnumeration) {
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b) {
      CellMask p({2, 2}), g({2, 2});
      int tp = 0, fp = 0, fn = 0, agree = 0;
      for (int k = 0; k < 4; ++k) {
        const int pa = (a >> k) & 1, gb = (b >> k) & 1;
        p[std::size_t(k)] = float(pa), g[std::size_t(k)] = float(gb);
        tp += pa && gb, fp += pa && !gb, fn += !pa && gb, agree += pa == gb;
      }
      const auto s = dice_iou(p, g);
      const bool empty = tp + fp + fn == 0;
      ASSERT_EQ(s.dice, empty ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn)) << a << " " << b;
      ASSERT_EQ(s.iou, empty ? 1.0 : double(tp) / (tp + fp + fn)) << a << " " << b;
      ASSERT_EQ(s.accuracy, agree / 4.0);
    }
}

TEST(Knn, DuplicatesAndSeparatedBlobs) {
  KeyedRng rng(31);
  const auto blobs = [&](std::size_t n, Tensor<float>& x, std::vector<int>& y) {
    x = Tensor<float>({n, 4});
    y.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = int(i % 2);
      for (std::size_t k = 0; k < 4; ++k) x[i * 4 + k] = float((k == std::size_t(y[i]) ? 3.0 : 0.0) + 0.5 * rng.normal());
    }
  };
  Tensor<float> tr, te;
  std::vector<int> ytr, yte;
  blobs(200, tr, ytr);
  blobs(100, te, yte);
  EXPECT_EQ(knn_balanced_accuracy(tr, ytr, tr, ytr, 1), 1.0);
  EXPECT_GT(knn_balanced_accuracy(tr, ytr, te, yte, 5), 0.95);
}

TEST(Knn, BalancedAccuracyAndTieRule) {
  Tensor<float> train({4, 2}, {1, 0, 0.9f, 0.1f, 0, 1, 0.1f, 0.9f});
  const std::vector<int> tl = {0, 0, 1, 1};
  Tensor<float> test({3, 2}, {1, 0.05f, 0.05f, 1, 0.2f, 1});
  EXPECT_DOUBLE_EQ(knn_balanced_accuracy(train, tl, test, {0, 1, 1}, 1), 1.0);
  // one error in class 1 (support 2), class 0 perfect: (1 + 0.5) / 2
  EXPECT_DOUBLE_EQ(knn_balanced_accuracy(train, tl, test, {0, 1, 0}, 1), 0.75);
  // k = 4 is a 2-2 tie everywhere, so every prediction is class 0
  EXPECT_DOUBLE_EQ(knn_balanced_accuracy(train, tl, test, {0, 1, 1}, 4), 0.5);
  EXPECT_THROW(knn_balanced_accuracy(train, tl, test, {0, 1, 1}, 5), ConfigError);
  EXPECT_THROW(knn_balanced_accuracy(train, {0, 0, 0, 0}, test, {0, 0, 0}, 1), ConfigError);
  EXPECT_THROW(knn_balanced_accuracy(train, {0, 0, 1, 2}, test, {0, 1, 1}, 1), ConfigError);
}

TEST(Reconstruction, CodecPsnrReport) {
  const auto imgs = toy_images(4, 5);
  const auto rows = reconstruction_psnr_report(imgs, LatentCodec{});
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_GT(r.psnr, 60.0);
  EXPECT_THROW(reconstruction_psnr_report({}, LatentCodec{}), ConfigError);
}
