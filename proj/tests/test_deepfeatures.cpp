#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "poisonguard/deepfeatures/deepfeatures.hpp"
#include "support/synthetic.hpp"

using namespace poisonguard;
namespace pt = poisonguard::testing;

namespace {

FeatureMatrix random_features(std::size_t N, std::size_t D, std::size_t K, std::uint64_t seed,
                              double spread = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, spread);
  FeatureMatrix fm{Tensor<double>({N, D}), std::vector<int>(N), "tap"};
  for (std::size_t i = 0; i < N; ++i) {
    fm.labels[i] = static_cast<int>(i % K);
    for (std::size_t j = 0; j < D; ++j) fm.vectors.data[i * D + j] = normal(rng) + 3.0 * fm.labels[i];
  }
  return fm;
}

long double loglik_oracle(std::span<const double> x, const std::vector<double>& mu,
                          const std::vector<double>& var) {
  long double s = 0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const long double d = x[j] - mu[j];
    s += -0.5L * std::log(2 * std::numbers::pi_v<long double> * var[j]) - 0.5L * d * d / var[j];
  }
  return s;
}

}  // namespace

TEST(Fit, DegenerateClassUsesFloor) {
  FeatureMatrix fm{Tensor<double>({3, 2}, {0.5, -1.0, 0.5, -1.0, 0.5, -1.0}), {0, 0, 0}, "t"};
  auto d = fit_class_densities(fm, 1);
  EXPECT_EQ(d.means[0], (std::vector<double>{0.5, -1.0}));
  EXPECT_EQ(d.variances[0], (std::vector<double>{1e-6, 1e-6}));
}

TEST(Fit, TwoPointsUnbiased) {
  FeatureMatrix fm{Tensor<double>({2, 1}, {0.0, 2.0}), {0, 0}, "t"};
  auto d = fit_class_densities(fm, 1);
  EXPECT_DOUBLE_EQ(d.means[0][0], 1.0);
  EXPECT_DOUBLE_EQ(d.variances[0][0], 2.0);
}

TEST(Fit, RejectsSingletonClassById) {
  FeatureMatrix fm{Tensor<double>({3, 1}, {0.0, 2.0, 1.0}), {0, 0, 4}, "t"};
  try {
    fit_class_densities(fm, 5);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("class 4"), std::string::npos);
  }
}

TEST(Fit, MatchesTwoPassOracle) {
  auto fm = random_features(500, 8, 4, 1, 2.5);
  auto d = fit_class_densities(fm, 4);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t j = 0; j < 8; ++j) {
      long double m = 0, v = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < 500; ++i)
        if (fm.labels[i] == static_cast<int>(k)) m += fm.vectors.data[i * 8 + j], ++n;
      m /= n;
      for (std::size_t i = 0; i < 500; ++i)
        if (fm.labels[i] == static_cast<int>(k)) {
          const long double dd = fm.vectors.data[i * 8 + j] - m;
          v += dd * dd;
        }
      v /= (n - 1);
      EXPECT_NEAR(d.means[k][j], static_cast<double>(m), 1e-9);
      EXPECT_NEAR(d.variances[k][j], static_cast<double>(v), 1e-9);
    }
  }
}

TEST(Loglik, AnalyticCases) {
  ClassConditionalDensity d{"t", 2, 1e-6, {0}, {{1.0, -2.0}}, {{1.0, 1.0}}};
  std::vector<double> x{1.0, -2.0};
  EXPECT_NEAR(loglik(x, d, 0), -std::log(2 * std::numbers::pi), 1e-12);
  auto doubled = d;
  doubled.variances[0] = {2.0, 2.0};
  EXPECT_NEAR(loglik(x, d, 0) - loglik(x, doubled, 0), 0.5 * 2 * std::log(2.0), 1e-12);
  EXPECT_THROW(loglik(std::vector<double>{1.0}, d, 0), ShapeError);
}

TEST(Loglik, MatchesOracleAndDecreasesAwayFromMean) {
  auto fm = random_features(200, 6, 3, 2);
  auto d = fit_class_densities(fm, 3);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(loglik(fm.row(i), d, c), static_cast<double>(loglik_oracle(fm.row(i), d.means[c], d.variances[c])), 1e-9);
  std::vector<double> x = d.means[1];
  double prev = loglik(x, d, 1);
  for (int step = 1; step <= 5; ++step) {
    x[2] += 0.3;
    const double cur = loglik(x, d, 1);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Classify, ModeDominanceAndTies) {
  auto fm = random_features(400, 5, 4, 3, 0.2);
  auto d = fit_class_densities(fm, 4);
  EXPECT_EQ(df_classify(d.means[3], d).label, 3);
  ClassConditionalDensity tie{"t", 1, 1e-6, {2, 5}, {{1.0}, {-1.0}}, {{1.0}, {1.0}}};
  EXPECT_EQ(df_classify(std::vector<double>{0.0}, tie).label, 2);
}

TEST(Classify, ShiftInvariantArgmax) {
  auto fm = random_features(300, 4, 3, 4);
  auto shifted = fm;
  for (auto& v : shifted.vectors.data) v += 7.5;
  auto a = df_classify_all(fm, fit_class_densities(fm, 3));
  auto b = df_classify_all(shifted, fit_class_densities(shifted, 3));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].label, b[i].label);
}

TEST(Extract, TapShapesAndDeterminism) {
  auto ds = pt::synthetic_dataset(7, {1, 28, 28}, 10, 1);
  auto net = build_scnn<float>(10, false, 2);
  auto a = extract_features(net, kPenultimateTap, ds, 3);
  EXPECT_EQ(a.vectors.shape, (Shape{7, 128}));
  EXPECT_EQ(extract_features(net, kPenultimateTap, ds, 3).vectors.data, a.vectors.data);
  auto b = extract_features(net, kPenultimateTap, ds, 5);
  for (std::size_t i = 0; i < a.vectors.numel(); ++i) EXPECT_NEAR(a.vectors.data[i], b.vectors.data[i], 1e-5);
  EXPECT_THROW(extract_features(net, "conv9", ds), UnknownTap);
  auto cifar = pt::synthetic_dataset(2, {3, 32, 32}, 10, 1);
  auto resnet = build_resnet20<float>(10, false, 2);
  EXPECT_EQ(extract_features(resnet, kPenultimateTap, cifar).vectors.shape, (Shape{2, 64}));
}

TEST(DensityFile, RoundTripAndCorruption) {
  auto d = fit_class_densities(random_features(90, 5, 3, 6), 3);
  auto dir = pt::scratch_dir("psdf");
  save_density(d, dir / "d.psdf");
  EXPECT_TRUE(read_density(dir / "d.psdf") == d);
  auto bytes = encode_density(d);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PSDF");
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_density(cut), FormatError);
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_density(bad), FormatError);
}

TEST(FeatureCsv, Header) {
  FeatureMatrix fm{Tensor<double>({1, 2}, {0.5, 1.0}), {3}, "t"};
  EXPECT_EQ(format_feature_csv(fm), "label,f0,f1\n3,0.5,1\n");
}
