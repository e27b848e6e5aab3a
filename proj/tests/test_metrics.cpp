#include <gtest/gtest.h>

#include "ildiff/metrics.hpp"
#include "ildiff/phantom.hpp"

using namespace ildiff;
using namespace ildiff::metrics;

TEST(Metrics, SsimIdentityIsOne) {
  const auto img = synth_clean_phantom(1, 32, 32, 1);
  EXPECT_NEAR(ssim(img, img), 1.0, 1e-12);
}

TEST(Metrics, SsimConstantImagesClosedForm) {
  // Means 0 and 1, zero variances: (C1)(C2) / ((1 + C1)(C2)) = C1 / (1 + C1).
  const auto a = UltrasoundImage::filled(16, 16, 0.0), b = UltrasoundImage::filled(16, 16, 1.0);
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(a, b), c1 / (1 + c1), 1e-12);
  EXPECT_NEAR(ssim(a, b), 9.999e-5, 1e-8);
}

TEST(Metrics, SsimSymmetricAndBounded) {
  const auto a = synth_clean_phantom(2, 32, 32, 1), b = synth_clean_phantom(3, 32, 32, 1);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LE(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
}

TEST(Metrics, PsnrClosedForms) {
  const auto a = UltrasoundImage::filled(16, 16, 0.25), b = UltrasoundImage::filled(16, 16, 0.75);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(psnr(a, b), 6.0206, 1e-4);
  EXPECT_EQ(psnr(a, a), kPsnrCapDb);
  EXPECT_NEAR(psnr_from_mse(1e-4), 40.0, 1e-12);
}

TEST(Metrics, ShapeMismatchRejected) {
  EXPECT_THROW(ssim(UltrasoundImage::filled(16, 16, 0), UltrasoundImage::filled(16, 20, 0)), ShapeError);
}

TEST(Metrics, BootstrapDeterministicAndBracketsMean) {
  std::vector<double> v;
  Rng rng(4);
  for (int i = 0; i < 200; ++i) v.push_back(0.7 + 0.05 * rng.normal());
  const auto a = bootstrap_ci(v, 1000, 0.95, 9), b = bootstrap_ci(v, 1000, 0.95, 9);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  const double m = mean_of(v);
  EXPECT_LT(a.low, m);
  EXPECT_GT(a.high, m);
  // Width should be close to 2 * 1.96 * s / sqrt(n).
  EXPECT_NEAR(a.high - a.low, 2 * 1.96 * std_of(v) / std::sqrt(200.0), 0.004);
}

TEST(Metrics, BootstrapConstantValuesDegenerate) {
  const auto ci = bootstrap_ci(std::vector<double>(10, 0.5));
  EXPECT_DOUBLE_EQ(ci.low, 0.5);
  EXPECT_DOUBLE_EQ(ci.high, 0.5);
  EXPECT_THROW(bootstrap_ci({}), ParameterError);
}

TEST(Metrics, QuantileInterpolates) {
  EXPECT_DOUBLE_EQ(quantile_sorted({0, 10}, 0.25), 2.5);
  EXPECT_DOUBLE_EQ(quantile_sorted({1, 2, 3}, 0.5), 2.0);
}

TEST(Metrics, ReportJsonRoundTrip) {
  std::vector<UltrasoundImage> out, ref;
  for (int i = 0; i < 5; ++i) {
    ref.push_back(synth_clean_phantom(i, 16, 16, 0));
    out.push_back(synth_clean_phantom(i + 10, 16, 16, 0));
  }
  const auto r = evaluate_pairs(out, ref);
  EXPECT_EQ(r.n_pairs, 5u);
  const auto j = to_json(r);
  EXPECT_EQ(j.begin().key(), "n_pairs");
  for (const char* k : {"ssim_mean", "ssim_std", "ssim_ci_95_low", "ssim_ci_95_high", "psnr_mean", "psnr_std",
                        "psnr_ci_95_low", "psnr_ci_95_high", "per_pair"})
    EXPECT_TRUE(j.contains(k)) << k;
  const auto back = report_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_DOUBLE_EQ(back.ssim_mean, r.ssim_mean);
  EXPECT_EQ(back.per_pair.size(), 5u);
  EXPECT_THROW(evaluate_pairs(out, {}), ParameterError);
}
