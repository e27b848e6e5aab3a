#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ildiff/image.hpp"

namespace ildiff::entropy {

enum class Weighting { uniform, intensity };

inline Weighting parse_weighting(const std::string& s) {
  if (s == "uniform") return Weighting::uniform;
  if (s == "intensity") return Weighting::intensity;
  throw ConfigError("unknown WUE weighting: " + s);
}

struct WueConfig {
  int window = 15;
  int bins = 64;
  Weighting weighting = Weighting::intensity;

  void validate() const {
    if (window < 3 || window % 2 == 0) throw ConfigError("WUE window must be odd and >= 3");
    if (bins < 2) throw ConfigError("WUE needs at least 2 bins");
  }
};

inline int bin_of(double v, int bins) {
  const int b = static_cast<int>(std::floor(v * bins));
  return std::clamp(b, 0, bins - 1);
}

// Weighted Shannon entropy (bits) of a histogram. Each bin's probability is
// scaled by its weight and renormalized before -sum p log2 p.
inline double weighted_entropy(std::span<const double> counts, Weighting weighting) {
  const int bins = static_cast<int>(counts.size());
  double z = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double w = weighting == Weighting::uniform ? 1.0 : (b + 0.5) / bins;
    z += w * counts[b];
  }
  if (z <= 0.0) return 0.0;
  double h = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (counts[b] <= 0.0) continue;
    const double w = weighting == Weighting::uniform ? 1.0 : (b + 0.5) / bins;
    const double p = w * counts[b] / z;
    h -= p * std::log2(p);
  }
  return h;
}

// Per-pixel weighted entropy of the centered window's intensity histogram
// over [0, 1]. Borders are handled by mirror reflection.
inline RealGrid wue_map(const UltrasoundImage& image, const WueConfig& cfg = {}) {
  cfg.validate();
  const int H = image.height(), W = image.width();
  if (cfg.window > std::min(H, W)) throw ParameterError("WUE window exceeds image size");
  std::vector<int> bin(static_cast<std::size_t>(H) * W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) bin[static_cast<std::size_t>(r) * W + c] = bin_of(image(r, c), cfg.bins);
  const int half = cfg.window / 2;
  RealGrid out(H, W);
  std::vector<double> hist(static_cast<std::size_t>(cfg.bins));
  for (int r = 0; r < H; ++r) {
    // Slide the window along the row, updating the histogram column by column.
    std::fill(hist.begin(), hist.end(), 0.0);
    for (int dr = -half; dr <= half; ++dr)
      for (int dc = -half; dc <= half; ++dc)
        hist[bin[static_cast<std::size_t>(reflect_index(r + dr, H)) * W + reflect_index(dc, W)]] += 1.0;
    for (int c = 0; c < W; ++c) {
      if (c > 0) {
        const int gone = reflect_index(c - 1 - half, W), added = reflect_index(c + half, W);
        for (int dr = -half; dr <= half; ++dr) {
          const std::size_t row = static_cast<std::size_t>(reflect_index(r + dr, H)) * W;
          hist[bin[row + gone]] -= 1.0;
          hist[bin[row + added]] += 1.0;
        }
      }
      out(r, c) = weighted_entropy(hist, cfg.weighting);
    }
  }
  return out;
}

}  // namespace ildiff::entropy
