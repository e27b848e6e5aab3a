#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildiff/core/random.hpp"
#include "ildiff/image.hpp"

namespace ildiff::metrics {

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Mean structural similarity over all fully-contained Gaussian windows.
inline double ssim(const UltrasoundImage& x, const UltrasoundImage& y, const SsimOptions& opt = {}) {
  require_same_shape(x, y, "ssim");
  const int radius = opt.window / 2;
  const auto k = gaussian_kernel(opt.sigma, radius);
  const RealGrid& gx = x.grid();
  const RealGrid& gy = y.grid();
  RealGrid xx(gx.height, gx.width), yy(gx.height, gx.width), xy(gx.height, gx.width);
  for (std::size_t i = 0; i < gx.size(); ++i) {
    xx.values[i] = gx.values[i] * gx.values[i];
    yy.values[i] = gy.values[i] * gy.values[i];
    xy.values[i] = gx.values[i] * gy.values[i];
  }
  const RealGrid mx = filter_valid(gx, k, k), my = filter_valid(gy, k, k);
  const RealGrid sxx = filter_valid(xx, k, k), syy = filter_valid(yy, k, k), sxy = filter_valid(xy, k, k);
  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double mux = mx.values[i], muy = my.values[i];
    const double vx = sxx.values[i] - mux * mux, vy = syy.values[i] - muy * muy;
    const double cov = sxy.values[i] - mux * muy;
    acc += ((2.0 * mux * muy + c1) * (2.0 * cov + c2)) / ((mux * mux + muy * muy + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

inline constexpr double kPsnrCapDb = 100.0;

inline double mse(const UltrasoundImage& x, const UltrasoundImage& y) {
  require_same_shape(x, y, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.pixels().size(); ++i) {
    const double d = x.pixels()[i] - y.pixels()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.pixels().size());
}

inline double psnr_from_mse(double m) {
  if (m <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / m));
}

// Peak 1; zero MSE reports the 100 dB cap.
inline double psnr(const UltrasoundImage& x, const UltrasoundImage& y) { return psnr_from_mse(mse(x, y)); }

struct ConfidenceInterval {
  double low = 0.0, high = 0.0;
};

// Linear-interpolated quantile of sorted data (q in [0, 1]).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ParameterError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Percentile bootstrap interval of the mean: resample the values with
// replacement, take each resample's mean, report the central `level` band.
inline ConfidenceInterval bootstrap_ci(const std::vector<double>& values, int n_resamples = 1000, double level = 0.95,
                                       std::uint64_t seed = 0) {
  if (values.empty()) throw ParameterError("bootstrap_ci: empty value list");
  if (n_resamples < 1) throw ParameterError("bootstrap_ci: n_resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("bootstrap_ci: level must be in (0, 1)");
  Rng rng(seed);
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

struct PairScore {
  double ssim = 0.0, psnr = 0.0;
};

struct MetricReport {
  double ssim_mean = 0.0, ssim_std = 0.0, ssim_ci_low = 0.0, ssim_ci_high = 0.0;
  double psnr_mean = 0.0, psnr_std = 0.0, psnr_ci_low = 0.0, psnr_ci_high = 0.0;
  std::size_t n_pairs = 0;
  std::vector<PairScore> per_pair;
};

inline double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for a single value.
inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct EvalOptions {
  int n_resamples = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

// Scores each output against its HIFU-off reference and aggregates.
inline MetricReport evaluate_pairs(const std::vector<UltrasoundImage>& outputs,
                                   const std::vector<UltrasoundImage>& references, const EvalOptions& opt = {}) {
  if (outputs.size() != references.size())
    throw ParameterError("evaluate_pairs: " + std::to_string(outputs.size()) + " outputs vs " +
                         std::to_string(references.size()) + " references");
  if (outputs.empty()) throw ParameterError("evaluate_pairs: no pairs");
  MetricReport r;
  r.n_pairs = outputs.size();
  std::vector<double> s, p;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const PairScore ps{ssim(outputs[i], references[i]), psnr(outputs[i], references[i])};
    r.per_pair.push_back(ps);
    s.push_back(ps.ssim);
    p.push_back(ps.psnr);
  }
  r.ssim_mean = mean_of(s);
  r.ssim_std = std_of(s);
  r.psnr_mean = mean_of(p);
  r.psnr_std = std_of(p);
  const auto cs = bootstrap_ci(s, opt.n_resamples, opt.level, opt.seed);
  const auto cp = bootstrap_ci(p, opt.n_resamples, opt.level, mix_seed(opt.seed, 1));
  r.ssim_ci_low = cs.low;
  r.ssim_ci_high = cs.high;
  r.psnr_ci_low = cp.low;
  r.psnr_ci_high = cp.high;
  return r;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["n_pairs"] = r.n_pairs;
  j["ssim_mean"] = r.ssim_mean;
  j["ssim_std"] = r.ssim_std;
  j["ssim_ci_95_low"] = r.ssim_ci_low;
  j["ssim_ci_95_high"] = r.ssim_ci_high;
  j["psnr_mean"] = r.psnr_mean;
  j["psnr_std"] = r.psnr_std;
  j["psnr_ci_95_low"] = r.psnr_ci_low;
  j["psnr_ci_95_high"] = r.psnr_ci_high;
  auto& arr = j["per_pair"] = nlohmann::ordered_json::array();
  for (const auto& p : r.per_pair) arr.push_back({{"ssim", p.ssim}, {"psnr", p.psnr}});
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.n_pairs = j.at("n_pairs").get<std::size_t>();
  r.ssim_mean = j.at("ssim_mean").get<double>();
  r.ssim_std = j.at("ssim_std").get<double>();
  r.ssim_ci_low = j.at("ssim_ci_95_low").get<double>();
  r.ssim_ci_high = j.at("ssim_ci_95_high").get<double>();
  r.psnr_mean = j.at("psnr_mean").get<double>();
  r.psnr_std = j.at("psnr_std").get<double>();
  r.psnr_ci_low = j.at("psnr_ci_95_low").get<double>();
  r.psnr_ci_high = j.at("psnr_ci_95_high").get<double>();
  for (const auto& p : j.at("per_pair")) r.per_pair.push_back({p.at("ssim").get<double>(), p.at("psnr").get<double>()});
  return r;
}

}  // namespace ildiff::metrics
