#pragma once

// Central-difference gradient check shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ildiff/core/autograd.hpp"
#include "ildiff/core/random.hpp"

namespace ildiff::checks {

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// loss() must rebuild the graph from the current values of `inputs` and
// return a scalar. Up to `samples` elements per input are perturbed.
inline GradCheckResult grad_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> inputs,
                                  double step = 1e-5, std::size_t samples = 24, std::uint64_t seed = 7) {
  for (auto& v : inputs) v.zero_grad();
  Var<double> out = loss();
  backward(out);
  Rng rng(seed);
  double num2 = 0, ana2 = 0, diff2 = 0;
  GradCheckResult r;
  for (auto& v : inputs) {
    const Tensor<double> g = v.grad().empty() ? Tensor<double>(v.shape()) : v.grad();
    auto& val = v.mutable_value();
    std::vector<std::size_t> idx(val.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > samples) {
      for (std::size_t i = 0; i < samples; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(samples);
    }
    for (std::size_t i : idx) {
      const double orig = val[i];
      val[i] = orig + step;
      const double fp = loss().value()[0];
      val[i] = orig - step;
      const double fm = loss().value()[0];
      val[i] = orig;
      const double num = (fp - fm) / (2 * step);
      num2 += num * num;
      ana2 += g[i] * g[i];
      diff2 += (num - g[i]) * (num - g[i]);
      r.max_abs = std::max(r.max_abs, std::abs(num - g[i]));
      ++r.checked;
    }
  }
  const double denom = std::max({std::sqrt(num2), std::sqrt(ana2), 1e-300});
  r.rel_error = std::sqrt(diff2) / denom;
  return r;
}

}  // namespace ildiff::checks
