#include <gtest/gtest.h>

#include "ildiff/entropy.hpp"
#include "ildiff/phantom.hpp"

using namespace ildiff;
using namespace ildiff::entropy;

TEST(Entropy, ConstantImageIsZero) {
  const auto m = wue_map(UltrasoundImage::filled(32, 32, 0.37), {});
  EXPECT_EQ(m.height, 32);
  EXPECT_EQ(m.width, 32);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(Entropy, UniformHistogramGivesLog2Bins) {
  std::vector<double> counts(64, 3.0);
  EXPECT_NEAR(weighted_entropy(counts, Weighting::uniform), 6.0, 1e-12);
}

TEST(Entropy, WindowFillingEveryBin) {
  // 3x3 window, 9 bins: a tiled 3x3 pattern puts one pixel in each bin for
  // every window position, including reflected borders.
  std::vector<double> tile(24 * 24);
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c) tile[r * 24 + c] = ((r % 3) * 3 + (c % 3) + 0.5) / 9.0;
  const auto m = wue_map(UltrasoundImage(24, 24, tile), {3, 9, Weighting::uniform});
  for (int r = 1; r < 23; ++r)
    for (int c = 1; c < 23; ++c) EXPECT_NEAR(m(r, c), std::log2(9.0), 1e-12);
}

TEST(Entropy, BoundedAndUniformMatchesPlainShannon) {
  const auto img = synth_clean_phantom(8, 48, 48, 2);
  const WueConfig cfg{5, 25, Weighting::uniform};
  const auto m = wue_map(img, cfg);
  for (double v : m.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, std::log2(25.0) + 1e-12);
  }
  // Direct windowed Shannon entropy at one interior pixel.
  std::vector<double> counts(25, 0.0);
  for (int dr = -2; dr <= 2; ++dr)
    for (int dc = -2; dc <= 2; ++dc) counts[bin_of(img(20 + dr, 30 + dc), 25)] += 1;
  double h = 0;
  for (double c : counts)
    if (c > 0) h -= c / 25 * std::log2(c / 25);
  EXPECT_NEAR(m(20, 30), h, 1e-12);
  const auto mi = wue_map(img, {5, 25, Weighting::intensity});
  for (double v : mi.values) EXPECT_LE(v, std::log2(25.0) + 1e-12);
}

TEST(Entropy, IntensityWeightingFavorsBrightBin) {
  std::vector<double> counts(16, 0.0);
  counts[1] = 10;
  counts[15] = 10;
  // Uniform: 1 bit. Intensity weights 1.5/16 vs 15.5/16 skew the mass bright.
  EXPECT_NEAR(weighted_entropy(counts, Weighting::uniform), 1.0, 1e-12);
  const double pb = 15.5 / (15.5 + 1.5);
  const double expected = -(pb * std::log2(pb) + (1 - pb) * std::log2(1 - pb));
  EXPECT_NEAR(weighted_entropy(counts, Weighting::intensity), expected, 1e-12);
  EXPECT_LT(expected, 1.0);
}

TEST(Entropy, Errors) {
  const auto img = UltrasoundImage::filled(16, 16, 0.5);
  EXPECT_THROW(wue_map(img, {17, 64, Weighting::uniform}), ParameterError);
  EXPECT_THROW(wue_map(img, {4, 64, Weighting::uniform}), ConfigError);
  EXPECT_THROW(wue_map(img, {3, 1, Weighting::uniform}), ConfigError);
  EXPECT_THROW(parse_weighting("log"), ConfigError);
}
