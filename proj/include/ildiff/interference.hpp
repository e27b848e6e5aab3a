#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "ildiff/core/random.hpp"
#include "ildiff/image.hpp"

namespace ildiff {

// Acoustic power labels used throughout acquisition, in watts.
inline constexpr std::array<int, 4> kPowerLevels{123, 167, 220, 277};

inline int power_index(int power_level) {
  for (std::size_t i = 0; i < kPowerLevels.size(); ++i)
    if (kPowerLevels[i] == power_level) return static_cast<int>(i);
  throw ConfigError("unsupported power level " + std::to_string(power_level) + " (expected 123, 167, 220 or 277)");
}

// Fringe amplitude grows linearly with the power-level index.
inline double amplitude_for_power(int power_level, double base_amplitude) {
  return base_amplitude * (1.0 + power_index(power_level));
}

struct InterferenceConfig {
  int power_level = 123;
  double base_amplitude = 0.12;
  double fringe_frequency = 0.125;  // cycles per pixel along the axial axis
  double broadband_sigma = 0.08;
  std::uint64_t seed = 0;

  double amplitude() const { return amplitude_for_power(power_level, base_amplitude); }

  void validate() const {
    power_index(power_level);
    if (!(fringe_frequency > 0.0 && fringe_frequency < 0.5)) throw ConfigError("fringe_frequency must be in (0, 0.5)");
    if (base_amplitude < 0.0 || broadband_sigma < 0.0) throw ConfigError("interference amplitudes must be >= 0");
  }
};

// Axial fringes with a random per-frame phase and slight lateral tilt, plus
// white broadband noise; the sum is clipped to [0, 1]. Each column carries a
// pure sinusoid at fringe_frequency before clipping.
inline UltrasoundImage apply_hifu_interference(const UltrasoundImage& clean, const InterferenceConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tilt = rng.uniform(-0.02, 0.02);  // phase radians per column
  const double a = cfg.amplitude();
  const double w = 2.0 * std::numbers::pi * cfg.fringe_frequency;
  const int H = clean.height(), W = clean.width();
  std::vector<double> out(clean.pixels().begin(), clean.pixels().end());
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double v = out[static_cast<std::size_t>(r) * W + c];
      if (a != 0.0) v += a * std::sin(w * r + phase + tilt * c);
      if (cfg.broadband_sigma != 0.0) v += cfg.broadband_sigma * rng.normal();
      out[static_cast<std::size_t>(r) * W + c] = v;
    }
  return UltrasoundImage::clamped(H, W, std::move(out));
}

}  // namespace ildiff
