#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "ildiff/core/random.hpp"
#include "ildiff/image.hpp"

namespace ildiff {

enum class TissueClass { phantom, ex_vivo, in_vivo };

inline std::string to_string(TissueClass t) {
  switch (t) {
    case TissueClass::phantom: return "phantom";
    case TissueClass::ex_vivo: return "ex_vivo";
    case TissueClass::in_vivo: return "in_vivo";
  }
  return "phantom";
}

inline TissueClass parse_tissue(const std::string& s) {
  if (s == "phantom") return TissueClass::phantom;
  if (s == "ex_vivo") return TissueClass::ex_vivo;
  if (s == "in_vivo") return TissueClass::in_vivo;
  throw FormatError("unknown tissue class: " + s);
}

struct SpeckleOptions {
  double psf_sigma_axial = 1.0;    // pixels, along rows (depth)
  double psf_sigma_lateral = 1.5;  // pixels, along columns
  double dynamic_range_db = 50.0;
};

struct PhantomOptions {
  SpeckleOptions speckle;
  double inclusion_radius = 0.0;  // pixels; 0 picks 12% of the short side
  double anechoic_level = 0.02;   // scatterer amplitude factor inside inclusions
  double reflector_gain = 6.0;    // amplitude factor on line reflectors
};

struct Disk {
  double cy, cx, r;
};

struct LineSegment {
  bool horizontal;
  double pos;         // row (horizontal) or column (vertical)
  double from, to;    // extent along the other axis
};

// Echogenicity layout of one synthetic scene. Frames of a session share a
// scene; cycle-to-cycle drift is applied with shifted().
struct SceneLayout {
  TissueClass tissue = TissueClass::phantom;
  int height = 0, width = 0;
  std::vector<Disk> anechoic;
  std::vector<LineSegment> reflectors;
  std::vector<double> layer_bounds;  // ex_vivo: rows of layer boundaries
  std::vector<double> layer_levels;  // ex_vivo: amplitude per layer
  double wave_amp = 0.0, wave_freq = 0.0, wave_phase = 0.0;
  Disk organ{0, 0, 0};  // in_vivo: elliptic organ, r = horizontal semi-axis
  double organ_aspect = 1.0;
  Disk lesion{0, 0, 0};  // hyperechoic focal region (r = 0: absent)
  double lesion_gain = 1.0;
  double shift_y = 0.0, shift_x = 0.0;

  SceneLayout shifted(double dy, double dx) const {
    SceneLayout s = *this;
    s.shift_y += dy;
    s.shift_x += dx;
    return s;
  }

  // Scatterer amplitude factor at pixel (r, c).
  double echogenicity(double r, double c, const PhantomOptions& opt) const {
    const double y = r - shift_y, x = c - shift_x;
    double e = 1.0;
    switch (tissue) {
      case TissueClass::phantom: break;
      case TissueClass::ex_vivo: {
        const double yy = y + wave_amp * std::sin(wave_freq * x + wave_phase);
        std::size_t layer = 0;
        while (layer < layer_bounds.size() && yy > layer_bounds[layer]) ++layer;
        e = layer_levels[layer];
        for (double b : layer_bounds)
          if (std::abs(yy - b) < 0.75) e = opt.reflector_gain * 0.5;
        break;
      }
      case TissueClass::in_vivo: {
        const double dy = (y - organ.cy) / (organ.r * organ_aspect), dx = (x - organ.cx) / organ.r;
        const double rho = std::sqrt(dy * dy + dx * dx);
        e = rho < 1.0 ? 0.55 : 1.0;
        if (std::abs(rho - 1.0) * organ.r < 0.8) e = opt.reflector_gain * 0.6;
        break;
      }
    }
    for (const auto& l : reflectors) {
      const double along = l.horizontal ? x : y, across = l.horizontal ? y : x;
      if (std::abs(across - l.pos) < 0.5 && along >= l.from && along <= l.to) e = opt.reflector_gain;
    }
    if (lesion.r > 0.0) {
      const double dy = y - lesion.cy, dx = (x - lesion.cx) * 0.6;
      if (dy * dy + dx * dx < lesion.r * lesion.r) e *= lesion_gain;
    }
    for (const auto& d : anechoic)
      if ((y - d.cy) * (y - d.cy) + (x - d.cx) * (x - d.cx) < d.r * d.r) e = opt.anechoic_level;
    return e;
  }
};

inline double default_inclusion_radius(int h, int w) { return 0.12 * std::min(h, w); }

// Random scene geometry for a tissue class.
inline SceneLayout make_layout(TissueClass tissue, int height, int width, int n_inclusions, Rng& rng,
                               const PhantomOptions& opt = {}) {
  validate_image_dims(height, width);
  if (n_inclusions < 0) throw ParameterError("negative inclusion count");
  SceneLayout s;
  s.tissue = tissue;
  s.height = height;
  s.width = width;
  const double r = opt.inclusion_radius > 0.0 ? opt.inclusion_radius : default_inclusion_radius(height, width);
  const double margin = r + 1.0;
  if (n_inclusions > 0 && (2.0 * margin > height || 2.0 * margin > width))
    throw ParameterError("inclusion radius " + std::to_string(r) + " does not fit a " + std::to_string(height) + "x" +
                         std::to_string(width) + " image");
  // Rejection-sample non-overlapping disks fully inside the frame.
  for (int i = 0; i < n_inclusions; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const Disk d{rng.uniform(margin, height - margin), rng.uniform(margin, width - margin), r};
      placed = true;
      for (const auto& o : s.anechoic)
        if (std::hypot(d.cy - o.cy, d.cx - o.cx) < d.r + o.r + 1.0) placed = false;
      if (placed) s.anechoic.push_back(d);
    }
    if (!placed) throw ParameterError("cannot place " + std::to_string(n_inclusions) + " inclusions of radius " +
                                      std::to_string(r) + " without overlap");
  }
  switch (tissue) {
    case TissueClass::phantom: {
      // Cross-wire pair.
      const double row = rng.uniform(0.3, 0.7) * height, col = rng.uniform(0.3, 0.7) * width;
      s.reflectors.push_back({true, std::round(row), 0.15 * width, 0.85 * width});
      s.reflectors.push_back({false, std::round(col), 0.15 * height, 0.85 * height});
      break;
    }
    case TissueClass::ex_vivo: {
      const int layers = 2 + static_cast<int>(rng.below(3));
      double y = 0.0;
      for (int i = 0; i < layers; ++i) {
        y += height / (layers + 1.0) * rng.uniform(0.7, 1.3);
        s.layer_bounds.push_back(y);
      }
      for (int i = 0; i <= layers; ++i) s.layer_levels.push_back(rng.uniform(0.25, 1.4));
      s.wave_amp = rng.uniform(0.5, 3.0);
      s.wave_freq = rng.uniform(0.05, 0.2);
      s.wave_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      break;
    }
    case TissueClass::in_vivo: {
      s.organ = {rng.uniform(0.45, 0.65) * height, rng.uniform(0.35, 0.65) * width, rng.uniform(0.3, 0.45) * width};
      s.organ_aspect = rng.uniform(0.6, 1.0);
      s.reflectors.push_back({true, std::round(rng.uniform(0.08, 0.15) * height), 0.0, static_cast<double>(width)});
      break;
    }
  }
  return s;
}

// Complex scatterer field padded by `pad` on each side.
struct ScattererField {
  int height = 0, width = 0, pad = 0;
  std::vector<std::complex<double>> amp;

  static ScattererField random(int h, int w, int pad, Rng& rng) {
    ScattererField f{h, w, pad, {}};
    f.amp.resize(static_cast<std::size_t>(h + 2 * pad) * (w + 2 * pad));
    for (auto& a : f.amp) a = {rng.normal(), rng.normal()};
    return f;
  }

  // sqrt(rho) * this + sqrt(1 - rho) * fresh: partially decorrelated copy.
  ScattererField blended(double rho, Rng& rng) const {
    ScattererField f = *this;
    const double a = std::sqrt(rho), b = std::sqrt(1.0 - rho);
    for (auto& v : f.amp) v = a * v + b * std::complex<double>(rng.normal(), rng.normal());
    return f;
  }
};

inline int psf_radius(const SpeckleOptions& o) {
  return static_cast<int>(std::ceil(3.0 * std::max(o.psf_sigma_axial, o.psf_sigma_lateral)));
}

// Scatterers weighted by echogenicity, convolved with a separable Gaussian
// PSF, envelope-detected, log-compressed to the dynamic range and min-max
// normalized to [0, 1].
inline UltrasoundImage render_bmode(const SceneLayout& layout, const ScattererField& field,
                                    const PhantomOptions& opt = {}) {
  const int H = layout.height, W = layout.width, P = field.pad;
  const int R = psf_radius(opt.speckle);
  if (field.height != H || field.width != W || P < R) throw ParameterError("scatterer field does not match layout");
  const int PH = H + 2 * P, PW = W + 2 * P;
  std::vector<std::complex<double>> weighted(field.amp.size());
  for (int r = 0; r < PH; ++r)
    for (int c = 0; c < PW; ++c)
      weighted[static_cast<std::size_t>(r) * PW + c] =
          field.amp[static_cast<std::size_t>(r) * PW + c] * layout.echogenicity(r - P, c - P, opt);
  const auto ka = gaussian_kernel(opt.speckle.psf_sigma_axial, R);
  const auto kl = gaussian_kernel(opt.speckle.psf_sigma_lateral, R);
  // Lateral pass over rows [P-R, P+H+R), then axial pass.
  std::vector<std::complex<double>> tmp(static_cast<std::size_t>(H + 2 * R) * W);
  for (int r = 0; r < H + 2 * R; ++r)
    for (int c = 0; c < W; ++c) {
      std::complex<double> s{};
      const int rr = r + P - R;
      for (int j = -R; j <= R; ++j) s += kl[j + R] * weighted[static_cast<std::size_t>(rr) * PW + (c + P + j)];
      tmp[static_cast<std::size_t>(r) * W + c] = s;
    }
  std::vector<double> env(static_cast<std::size_t>(H) * W);
  double peak = 0.0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      std::complex<double> s{};
      for (int i = -R; i <= R; ++i) s += ka[i + R] * tmp[static_cast<std::size_t>(r + R + i) * W + c];
      const double e = std::abs(s);
      env[static_cast<std::size_t>(r) * W + c] = e;
      peak = std::max(peak, e);
    }
  const double dr = opt.speckle.dynamic_range_db;
  double lo = 1.0, hi = 0.0;
  for (double& v : env) {
    const double db = v > 0.0 && peak > 0.0 ? 20.0 * std::log10(v / peak) : -dr;
    v = (std::max(db, -dr) + dr) / dr;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  for (double& v : env) v = (v - lo) / span;
  return UltrasoundImage::clamped(H, W, std::move(env));
}

// Tissue-mimicking phantom: speckle background, n anechoic disks and a pair of
// bright cross-wire reflectors.
inline UltrasoundImage synth_clean_phantom(std::uint64_t seed, int height, int width, int n_inclusions,
                                           const PhantomOptions& opt = {}) {
  Rng rng(seed);
  const SceneLayout layout = make_layout(TissueClass::phantom, height, width, n_inclusions, rng, opt);
  const ScattererField field = ScattererField::random(height, width, psf_radius(opt.speckle) + 2, rng);
  return render_bmode(layout, field, opt);
}

}  // namespace ildiff
