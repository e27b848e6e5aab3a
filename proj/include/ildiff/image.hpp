#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ildiff/core/error.hpp"
#include "ildiff/core/tensor.hpp"

namespace ildiff {

// Dense real-valued H x W grid with no range constraint (filter outputs,
// entropy maps, raw-float payloads).
struct RealGrid {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  RealGrid() = default;
  RealGrid(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}
  RealGrid(int h, int w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
      throw ShapeError("grid data size does not match " + std::to_string(h) + "x" + std::to_string(w));
  }

  double& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  double operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return values.size(); }
};

inline void validate_image_dims(int height, int width) {
  if (height < 16 || width < 16 || height % 4 != 0 || width % 4 != 0)
    throw ShapeError("image dimensions must be >= 16 and divisible by 4, got " + std::to_string(height) + "x" +
                     std::to_string(width));
}

// Grayscale B-mode image with intensities in [0, 1]. Dimensions are at least
// 16 and divisible by 4 so two stride-2 halvings land on an integer grid.
class UltrasoundImage {
 public:
  UltrasoundImage() = default;
  UltrasoundImage(int height, int width, std::vector<double> pixels) : grid_(height, width, std::move(pixels)) {
    validate_image_dims(height, width);
    for (double v : grid_.values)
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("pixel value outside [0,1]: " + std::to_string(v));
  }

  static UltrasoundImage filled(int height, int width, double value) {
    return UltrasoundImage(height, width, std::vector<double>(static_cast<std::size_t>(height) * width, value));
  }

  // Clamps into [0, 1]; NaN maps to 0.
  static UltrasoundImage clamped(int height, int width, std::vector<double> pixels) {
    for (double& v : pixels) v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    return UltrasoundImage(height, width, std::move(pixels));
  }
  static UltrasoundImage clamped(const RealGrid& g) { return clamped(g.height, g.width, g.values); }

  int height() const { return grid_.height; }
  int width() const { return grid_.width; }
  bool empty() const { return grid_.values.empty(); }
  double operator()(int r, int c) const { return grid_(r, c); }
  std::span<const double> pixels() const { return grid_.values; }
  const RealGrid& grid() const { return grid_; }
  bool same_shape(const UltrasoundImage& o) const { return height() == o.height() && width() == o.width(); }

  bool operator==(const UltrasoundImage& o) const {
    return same_shape(o) && grid_.values == o.grid_.values;
  }

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({1, 1, height(), width()}, std::vector<T>(grid_.values.begin(), grid_.values.end()));
  }

  // Item n of an [N, 1, H, W] tensor, clamped into range.
  template <typename T>
  static UltrasoundImage from_tensor(const Tensor<T>& t, int n = 0) {
    if (t.rank() != 4 || t.dim(1) != 1) throw ShapeError("expected [N,1,H,W] tensor, got " + shape_str(t.shape()));
    const std::size_t hw = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
    std::vector<double> px(t.data() + n * hw, t.data() + (n + 1) * hw);
    return clamped(t.dim(2), t.dim(3), std::move(px));
  }

 private:
  RealGrid grid_;
};

inline void require_same_shape(const UltrasoundImage& a, const UltrasoundImage& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

// Normalized 1-D Gaussian taps over [-radius, radius].
inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    s += k[i + radius];
  }
  for (double& v : k) v /= s;
  return k;
}

// Separable 'valid' correlation: output shrinks by the kernel extents.
inline RealGrid filter_valid(const RealGrid& in, std::span<const double> k_rows, std::span<const double> k_cols) {
  const int kr = static_cast<int>(k_rows.size()), kc = static_cast<int>(k_cols.size());
  const int ho = in.height - kr + 1, wo = in.width - kc + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("filter_valid: kernel larger than input");
  RealGrid tmp(in.height, wo);
  for (int r = 0; r < in.height; ++r)
    for (int c = 0; c < wo; ++c) {
      double s = 0.0;
      for (int j = 0; j < kc; ++j) s += k_cols[j] * in(r, c + j);
      tmp(r, c) = s;
    }
  RealGrid out(ho, wo);
  for (int r = 0; r < ho; ++r)
    for (int c = 0; c < wo; ++c) {
      double s = 0.0;
      for (int i = 0; i < kr; ++i) s += k_rows[i] * tmp(r + i, c);
      out(r, c) = s;
    }
  return out;
}

// Index into [0, n) with whole-sample mirror reflection (a b c | c b a).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace ildiff
