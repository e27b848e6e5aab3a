#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "ildiff/metrics.hpp"
#include "ildiff/pipeline/model.hpp"

namespace ildiff::pipeline {

struct KTiming {
  int K = 0;
  double sampler_mean_ms = 0, sampler_std_ms = 0;
  double total_ms = 0;  // encode + sampler + decode, per frame
  double fps = 0;       // 1000 / total_ms
};

struct LinearFit {
  double slope = 0, intercept = 0, r2 = 0;
};

struct TimingReport {
  std::vector<KTiming> per_k;
  double encode_ms = 0, decode_ms = 0;
  LinearFit fit;  // sampler mean ms against K
  int repetitions = 0, warmup = 0;
};

// Ordinary least squares y = a x + b with the coefficient of determination.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ParameterError("fit_line needs two or more matching points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sx += x[i], sy += y[i];
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ParameterError("fit_line: x values are all equal");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += r * r;
  }
  f.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return f;
}

// Per-frame timings over `frames` (cycled), `repetitions` measured runs per
// K after `warmup` unmeasured ones. Repetitions for different K are
// interleaved so slow drifts in machine load spread over all K evenly.
template <typename T>
TimingReport bench_timing(const LatentDiffusionModel<T>& model, const std::vector<UltrasoundImage>& frames,
                          const std::vector<int>& ks, int repetitions, int warmup = 2, std::uint64_t seed = 0) {
  if (frames.empty()) throw DataError("bench: no frames");
  if (ks.empty()) throw ParameterError("bench: empty K list");
  if (repetitions < 1 || warmup < 0) throw ParameterError("bench: repetitions >= 1 and warmup >= 0 required");
  for (int k : ks)
    if (k < 1 || k > model.schedule().T) throw ConfigError("bench: K " + std::to_string(k) + " outside [1, T]");

  std::vector<std::vector<double>> sampler(ks.size());
  std::vector<double> enc, dec;
  std::size_t frame = 0;
  for (int w = 0; w < warmup; ++w)
    for (int k : ks) model.denoise(frames[frame++ % frames.size()], k, seed);
  for (int r = 0; r < repetitions; ++r)
    for (std::size_t i = 0; i < ks.size(); ++i) {
      DenoiseTiming t;
      model.denoise(frames[frame % frames.size()], ks[i], mix_seed(seed, frame), &t);
      ++frame;
      sampler[i].push_back(t.sampler_ms);
      enc.push_back(t.encode_ms);
      dec.push_back(t.decode_ms);
    }

  TimingReport rep;
  rep.repetitions = repetitions;
  rep.warmup = warmup;
  rep.encode_ms = metrics::mean_of(enc);
  rep.decode_ms = metrics::mean_of(dec);
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    KTiming kt;
    kt.K = ks[i];
    kt.sampler_mean_ms = metrics::mean_of(sampler[i]);
    kt.sampler_std_ms = metrics::std_of(sampler[i]);
    kt.total_ms = rep.encode_ms + kt.sampler_mean_ms + rep.decode_ms;
    kt.fps = 1000.0 / kt.total_ms;
    rep.per_k.push_back(kt);
    xs.push_back(ks[i]);
    ys.push_back(kt.sampler_mean_ms);
  }
  if (ks.size() >= 2) rep.fit = fit_line(xs, ys);
  return rep;
}

inline double sampler_ratio(const TimingReport& r, int k_hi, int k_lo) {
  const KTiming *hi = nullptr, *lo = nullptr;
  for (const auto& k : r.per_k) {
    if (k.K == k_hi) hi = &k;
    if (k.K == k_lo) lo = &k;
  }
  if (!hi || !lo) throw ParameterError("sampler_ratio: K not in report");
  return hi->sampler_mean_ms / lo->sampler_mean_ms;
}

inline nlohmann::ordered_json to_json(const TimingReport& r) {
  nlohmann::ordered_json j;
  j["repetitions"] = r.repetitions;
  j["warmup"] = r.warmup;
  j["encode_ms"] = r.encode_ms;
  j["decode_ms"] = r.decode_ms;
  auto& arr = j["per_k"] = nlohmann::ordered_json::array();
  for (const auto& k : r.per_k)
    arr.push_back({{"K", k.K},
                   {"sampler_mean_ms", k.sampler_mean_ms},
                   {"sampler_std_ms", k.sampler_std_ms},
                   {"total_ms", k.total_ms},
                   {"fps", k.fps}});
  j["fit"] = {{"slope_ms_per_step", r.fit.slope}, {"intercept_ms", r.fit.intercept}, {"r2", r.fit.r2}};
  return j;
}

}  // namespace ildiff::pipeline
