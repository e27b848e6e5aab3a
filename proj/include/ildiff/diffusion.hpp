#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ildiff/core/ops.hpp"
#include "ildiff/core/random.hpp"

namespace ildiff::diffusion {

// Linear beta schedule; index 0 holds the alpha_bar_0 = 1 convention.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // betas[0] = 0, betas[1..T]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // cumulative product, alpha_bars[0] = 1

  void check_t(int t) const {
    if (t < 0 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  }
};

inline NoiseSchedule build_schedule(int T = 1000, double beta_start = 0.0015, double beta_end = 0.0155) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule betas must satisfy 0 < start <= end < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.assign(T + 1, 0.0);
  s.alphas.assign(T + 1, 1.0);
  s.alpha_bars.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.betas[t] = T == 1 ? beta_start : beta_start + (t - 1) * (beta_end - beta_start) / (T - 1);
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
  }
  return s;
}

// z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  sched.check_t(t);
  z0.check_same(eps);
  if (t == 0) return z0;
  const T a = static_cast<T>(std::sqrt(sched.alpha_bars[t])), b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bars[t]));
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

// Deterministic DDIM update for eta = 0; eta > 0 adds sigma * noise.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, int t, int t_prev, const Tensor<T>& eps_hat, double eta,
                    const NoiseSchedule& sched, const Tensor<T>* noise = nullptr) {
  sched.check_t(t);
  sched.check_t(t_prev);
  if (t_prev >= t) throw ParameterError("ddim_step: t_prev must be < t");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ParameterError("ddim_step: eta must be in [0, 1]");
  z_t.check_same(eps_hat);
  const double ab = sched.alpha_bars[t], ab_prev = sched.alpha_bars[t_prev];
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  if (sigma > 0.0 && !noise) throw ParameterError("ddim_step: eta > 0 requires a noise tensor");
  if (noise) z_t.check_same(*noise);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab), sp = std::sqrt(ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  Tensor<T> out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (static_cast<double>(z_t[i]) - sb * eps_hat[i]) / sa;
    double v = sp * x0 + dir * eps_hat[i];
    if (sigma > 0.0) v += sigma * (*noise)[i];
    out[i] = static_cast<T>(v);
  }
  return out;
}

// K strictly increasing timesteps in [1, T] spaced uniformly, ending at T.
inline std::vector<int> timestep_subsequence(int T, int K) {
  if (K < 1 || K > T) throw ConfigError("sampler K must be in [1, " + std::to_string(T) + "]");
  std::vector<int> ts(static_cast<std::size_t>(K));
  for (int i = 1; i <= K; ++i) ts[i - 1] = static_cast<int>((static_cast<long long>(i) * T) / K);
  return ts;
}

struct SamplerConfig {
  int K = 5;
  double eta = 0.0;
};

// Predictor signature: (z_t, t, cond) -> eps_hat.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>&, int, const Tensor<T>&)>;

// Reverse process from seeded z_T ~ N(0, I) down to t = 0.
template <typename T, typename Predictor>
Tensor<T> ddim_sample(const Tensor<T>& cond, const Shape& latent_shape, const SamplerConfig& sc, std::uint64_t seed,
                      const NoiseSchedule& sched, Predictor&& predict) {
  const auto ts = timestep_subsequence(sched.T, sc.K);
  Rng rng(seed);
  Tensor<T> z = Tensor<T>::randn(latent_shape, rng);
  for (int i = sc.K - 1; i >= 0; --i) {
    const int t = ts[i], t_prev = i > 0 ? ts[i - 1] : 0;
    const Tensor<T> eps = predict(z, t, cond);
    if (sc.eta > 0.0) {
      const Tensor<T> noise = Tensor<T>::randn(latent_shape, rng);
      z = ddim_step(z, t, t_prev, eps, sc.eta, sched, &noise);
    } else {
      z = ddim_step(z, t, t_prev, eps, 0.0, sched);
    }
  }
  return z;
}

// MSE between the injected noise and the prediction on q_sample(z0, t, eps).
// The predictor receives the noised latent and returns a differentiable Var.
template <typename T, typename Predictor>
Var<T> ldm_loss(const Tensor<T>& z0, const Var<T>& cond, const std::vector<int>& t, const Tensor<T>& eps,
                const NoiseSchedule& sched, Predictor&& predict) {
  z0.check_same(eps);
  if (z0.rank() != 4 || static_cast<int>(t.size()) != z0.dim(0))
    throw ShapeError("ldm_loss: one timestep per batch item required");
  Tensor<T> zt(z0.shape());
  const std::size_t per = z0.size() / static_cast<std::size_t>(z0.dim(0));
  for (int n = 0; n < z0.dim(0); ++n) {
    sched.check_t(t[n]);
    const T a = static_cast<T>(std::sqrt(sched.alpha_bars[t[n]])), b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bars[t[n]]));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) zt[i] = a * z0[i] + b * eps[i];
  }
  Var<T> pred = predict(Var<T>(std::move(zt)), t, cond);
  return ops::mse(pred, Var<T>(eps));
}

}  // namespace ildiff::diffusion
