#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "ildiff/image.hpp"

namespace ildiff::notch {

struct NotchConfig {
  double center_freq = 0.125;  // cycles per pixel, in (0, 0.5)
  double quality_factor = 10.0;
  bool zero_phase = true;

  void validate() const {
    if (!(center_freq > 0.0 && center_freq < 0.5)) throw ConfigError("notch center frequency must be in (0, 0.5)");
    if (!(quality_factor > 0.0)) throw ConfigError("notch quality factor must be > 0");
  }
};

// Normalized biquad (a0 = 1): y = b0 x + b1 x1 + b2 x2 - a1 y1 - a2 y2.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  std::complex<double> response(double freq) const {
    const std::complex<double> z1 = std::polar(1.0, -2.0 * std::numbers::pi * freq);
    const std::complex<double> z2 = z1 * z1;
    return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
  }

  double pole_radius() const { return std::sqrt(std::abs(a2)); }

  // Samples for the impulse response envelope to fall by 1/e.
  int settling_length() const {
    const double r = pole_radius();
    return static_cast<int>(std::ceil(1.0 / std::max(1.0 - r, 1e-6)));
  }
};

// Second-order notch: zeros on the unit circle at +-2 pi f0, poles on the same
// angle at a radius set by Q (bandwidth f0 / Q). Unit gain at DC and Nyquist.
inline Biquad design_notch(const NotchConfig& cfg) {
  cfg.validate();
  const double w0 = 2.0 * std::numbers::pi * cfg.center_freq;
  const double alpha = std::sin(w0) / (2.0 * cfg.quality_factor);
  const double a0 = 1.0 + alpha;
  const double c = std::cos(w0);
  return {1.0 / a0, -2.0 * c / a0, 1.0 / a0, -2.0 * c / a0, (1.0 - alpha) / a0};
}

// State starts at the DC steady state of the first sample (valid because the
// DC gain is one), so a constant line passes without a start-up transient.
inline void filter_inplace(const Biquad& f, std::vector<double>& x) {
  if (x.empty()) return;
  double x1 = x[0], x2 = x[0], y1 = x[0], y2 = x[0];
  for (double& v : x) {
    const double y = f.b0 * v + f.b1 * x1 + f.b2 * x2 - f.a1 * y1 - f.a2 * y2;
    x2 = x1;
    x1 = v;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

inline constexpr int kFilterOrder = 2;

// Filters one axial line with mirror padding of three settling lengths.
inline std::vector<double> filter_line(const Biquad& f, std::span<const double> line, bool zero_phase) {
  const int n = static_cast<int>(line.size());
  const int pad = 3 * f.settling_length();
  std::vector<double> buf(static_cast<std::size_t>(n + 2 * pad));
  for (int i = 0; i < n + 2 * pad; ++i) buf[i] = line[reflect_index(i - pad, n)];
  filter_inplace(f, buf);
  if (zero_phase) {
    std::reverse(buf.begin(), buf.end());
    filter_inplace(f, buf);
    std::reverse(buf.begin(), buf.end());
  }
  return {buf.begin() + pad, buf.begin() + pad + n};
}

// Column-wise (axial) filtering without clipping; linear in the input.
inline RealGrid apply_notch_unclipped(const RealGrid& in, const NotchConfig& cfg) {
  if (in.height < 3 * kFilterOrder)
    throw ShapeError("notch: image needs at least " + std::to_string(3 * kFilterOrder) + " rows");
  const Biquad f = design_notch(cfg);
  RealGrid out(in.height, in.width);
  std::vector<double> col(in.height);
  for (int c = 0; c < in.width; ++c) {
    for (int r = 0; r < in.height; ++r) col[r] = in(r, c);
    const auto y = filter_line(f, col, cfg.zero_phase);
    for (int r = 0; r < in.height; ++r) out(r, c) = y[r];
  }
  return out;
}

inline UltrasoundImage apply_notch(const UltrasoundImage& image, const NotchConfig& cfg) {
  return UltrasoundImage::clamped(apply_notch_unclipped(image.grid(), cfg));
}

}  // namespace ildiff::notch
