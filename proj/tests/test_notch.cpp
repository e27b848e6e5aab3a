#include <gtest/gtest.h>

#include <numbers>

#include "ildiff/notch.hpp"

using namespace ildiff;
using namespace ildiff::notch;

namespace {

// Least-squares projection energy of each column onto sin/cos at f, summed.
double stripe_energy(const RealGrid& g, double f, int r0, int r1) {
  double e = 0.0;
  const double w = 2 * std::numbers::pi * f;
  for (int c = 0; c < g.width; ++c) {
    double ss = 0, cc = 0, sc = 0, ys = 0, yc = 0;
    for (int r = r0; r < r1; ++r) {
      const double s = std::sin(w * r), k = std::cos(w * r);
      ss += s * s, cc += k * k, sc += s * k, ys += g(r, c) * s, yc += g(r, c) * k;
    }
    const double det = ss * cc - sc * sc;
    const double a = (ys * cc - yc * sc) / det, b = (yc * ss - ys * sc) / det;
    e += (a * a + b * b) / 2 * (r1 - r0);
  }
  return e;
}

}  // namespace

TEST(Notch, ResponseAtCenterDcNyquist) {
  const NotchConfig cfg{0.125, 10, true};
  const auto f = design_notch(cfg);
  EXPECT_LE(20 * std::log10(std::abs(f.response(cfg.center_freq)) + 1e-300), -60.0);
  EXPECT_NEAR(std::abs(f.response(0.0)), 1.0, 1e-6);
  EXPECT_NEAR(std::abs(f.response(0.5)), 1.0, 1e-6);
  // On a 4096-point grid the bin at f0 is the minimum.
  double best = 1e9;
  int arg = -1;
  for (int i = 0; i <= 2048; ++i) {
    const double m = std::abs(f.response(i / 4096.0));
    if (m < best) best = m, arg = i;
  }
  EXPECT_EQ(arg, 512);
}

TEST(Notch, BandSelectivity) {
  for (double q : {5.0, 10.0, 20.0}) {
    const NotchConfig cfg{0.125, q, true};
    const auto f = design_notch(cfg);
    // Zero-phase application squares the magnitude.
    const double db = -20 * std::log10(std::norm(f.response(2 * cfg.center_freq)));
    EXPECT_LT(db, 3.0) << q;
  }
}

TEST(Notch, InvalidConfig) {
  EXPECT_THROW(design_notch({0.0, 10, true}), ConfigError);
  EXPECT_THROW(design_notch({0.5, 10, true}), ConfigError);
  EXPECT_THROW(design_notch({0.1, 0, true}), ConfigError);
}

TEST(Notch, ConstantImageUnchanged) {
  const auto img = UltrasoundImage::filled(64, 32, 0.4);
  const auto out = apply_notch(img, {});
  for (int r = 8; r < 56; ++r)
    for (int c = 0; c < 32; ++c) EXPECT_NEAR(out(r, c), 0.4, 1e-3);
}

TEST(Notch, RemovesStripeAtCenter) {
  const int H = 512, W = 8;
  const double f0 = 0.125;
  RealGrid stripe(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) stripe(r, c) = 0.2 * std::sin(2 * std::numbers::pi * f0 * r + 0.3 * c);
  const auto out = apply_notch_unclipped(stripe, {f0, 10, true});
  const int margin = 3 * design_notch({f0, 10, true}).settling_length();
  const double before = stripe_energy(stripe, f0, margin, H - margin);
  const double after = stripe_energy(out, f0, margin, H - margin);
  EXPECT_LE(after, 0.01 * before);
}

TEST(Notch, LinearAndZeroPhase) {
  RealGrid a(64, 4), b(64, 4);
  Rng rng(3);
  for (auto& v : a.values) v = rng.normal();
  for (auto& v : b.values) v = rng.normal();
  RealGrid s(64, 4);
  for (std::size_t i = 0; i < s.size(); ++i) s.values[i] = 2 * a.values[i] - b.values[i];
  const NotchConfig cfg{0.2, 8, true};
  const auto fa = apply_notch_unclipped(a, cfg), fb = apply_notch_unclipped(b, cfg), fs = apply_notch_unclipped(s, cfg);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(fs.values[i], 2 * fa.values[i] - fb.values[i], 1e-10);
  // A slow ramp passes through zero-phase filtering without a shift.
  RealGrid ramp(128, 1);
  for (int r = 0; r < 128; ++r) ramp(r, 0) = std::sin(2 * std::numbers::pi * 0.01 * r);
  const auto fr = apply_notch_unclipped(ramp, {0.25, 10, true});
  for (int r = 32; r < 96; ++r) EXPECT_NEAR(fr(r, 0), ramp(r, 0), 5e-3);
}

TEST(Notch, TooFewRows) {
  EXPECT_THROW(apply_notch_unclipped(RealGrid(5, 16), {}), ShapeError);
}
