#include <gtest/gtest.h>

#include "ildiff/diffusion.hpp"

using namespace ildiff;
using namespace ildiff::diffusion;

TEST(Diffusion, ScheduleEndpoints) {
  const auto s = build_schedule(1000, 0.0015, 0.0155);
  EXPECT_DOUBLE_EQ(s.betas[1], 0.0015);
  EXPECT_NEAR(s.betas[1000], 0.0155, 1e-15);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bars[1], 0.9985);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) prod *= 1.0 - (0.0015 + (t - 1) * (0.0155 - 0.0015) / 999.0);
  EXPECT_NEAR(s.alpha_bars[1000], prod, 1e-15);
  EXPECT_LT(s.alpha_bars[1000], 1e-3);
  EXPECT_GT(s.alpha_bars[1000], 0.0);
}

TEST(Diffusion, ScheduleMonotoneAndRecurrence) {
  const auto s = build_schedule();
  for (int t = 1; t < s.T; ++t) {
    EXPECT_LT(s.betas[t], s.betas[t + 1]);
    EXPECT_GT(s.alpha_bars[t], s.alpha_bars[t + 1]);
    EXPECT_NEAR(s.alpha_bars[t] * s.alphas[t + 1], s.alpha_bars[t + 1], 1e-12);
  }
  EXPECT_THROW(build_schedule(0), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.02, 0.01), ConfigError);
  EXPECT_THROW(build_schedule(10, 0.0, 0.01), ConfigError);
}

TEST(Diffusion, QSampleLaws) {
  const auto s = build_schedule();
  Rng rng(1);
  const auto z0 = Tensor<double>::randn({1, 3, 4, 4}, rng), eps = Tensor<double>::randn({1, 3, 4, 4}, rng);
  EXPECT_EQ(q_sample(z0, 0, eps, s), z0);
  const auto zt = q_sample(Tensor<double>(z0.shape()), 300, eps, s);
  for (std::size_t i = 0; i < zt.size(); ++i) EXPECT_NEAR(zt[i], std::sqrt(1 - s.alpha_bars[300]) * eps[i], 1e-15);
  EXPECT_THROW(q_sample(z0, 1001, eps, s), ParameterError);
}

TEST(Diffusion, QSampleMarginalMonteCarlo) {
  const auto s = build_schedule();
  Rng rng(2);
  const int n = 100000;
  for (int t : {200, 1000}) {
    const Tensor<double> z0({n}, 0.8);
    const auto eps = Tensor<double>::randn({n}, rng);
    const auto zt = q_sample(z0, t, eps, s);
    double m = 0, v = 0;
    for (double x : zt.values()) m += x;
    m /= n;
    for (double x : zt.values()) v += (x - m) * (x - m);
    v /= n - 1;
    EXPECT_NEAR(m, std::sqrt(s.alpha_bars[t]) * 0.8, 0.01);
    EXPECT_NEAR(v / (1 - s.alpha_bars[t]), 1.0, 0.02);
  }
}

TEST(Diffusion, DdimInversionRecoversZ0) {
  const auto s = build_schedule();
  Rng rng(3);
  const auto z0 = Tensor<double>::randn({2, 3, 4, 4}, rng), eps = Tensor<double>::randn({2, 3, 4, 4}, rng);
  for (int t : {1, 10, 500, 1000}) {
    const auto back = ddim_step(q_sample(z0, t, eps, s), t, 0, eps, 0.0, s);
    EXPECT_LE(max_abs_diff(back, z0), 1e-6) << t;
  }
}

TEST(Diffusion, DdimZeroNoiseScaling) {
  const auto s = build_schedule();
  Rng rng(4);
  const auto z = Tensor<double>::randn({1, 2, 2, 2}, rng);
  const auto out = ddim_step(z, 600, 400, Tensor<double>(z.shape()), 0.0, s);
  for (std::size_t i = 0; i < z.size(); ++i)
    EXPECT_NEAR(out[i], std::sqrt(s.alpha_bars[400] / s.alpha_bars[600]) * z[i], 1e-12);
  EXPECT_THROW(ddim_step(z, 400, 400, z, 0.0, s), ParameterError);
  EXPECT_THROW(ddim_step(z, 400, 500, z, 0.0, s), ParameterError);
  EXPECT_THROW(ddim_step(z, 400, 300, z, 0.5, s), ParameterError);  // eta > 0 needs noise
}

TEST(Diffusion, Subsequence) {
  EXPECT_EQ(timestep_subsequence(1000, 5), (std::vector<int>{200, 400, 600, 800, 1000}));
  const auto all = timestep_subsequence(20, 20);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(all[i], i + 1);
  const auto odd = timestep_subsequence(1000, 30);
  EXPECT_EQ(odd.back(), 1000);
  for (std::size_t i = 1; i < odd.size(); ++i) EXPECT_LT(odd[i - 1], odd[i]);
  EXPECT_THROW(timestep_subsequence(1000, 0), ConfigError);
  EXPECT_THROW(timestep_subsequence(10, 11), ConfigError);
}

TEST(Diffusion, SampleDeterministicAndComposes) {
  const auto s = build_schedule(50, 0.0015, 0.0155 * 20);
  const Tensor<double> cond({1, 3, 2, 2}, 0.3);
  auto predictor = [](const Tensor<double>& z, int t, const Tensor<double>& c) {
    Tensor<double> e(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) e[i] = 0.5 * z[i] - 0.1 * c[i] + 0.001 * t;
    return e;
  };
  const Shape shape{1, 3, 2, 2};
  const auto a = ddim_sample(cond, shape, {50, 0.0}, 17, s, predictor);
  EXPECT_EQ(ddim_sample(cond, shape, {50, 0.0}, 17, s, predictor), a);
  Rng rng(17);
  auto z = Tensor<double>::randn(shape, rng);
  for (int t = 50; t >= 1; --t) z = ddim_step(z, t, t - 1, predictor(z, t, cond), 0.0, s);
  EXPECT_LE(max_abs_diff(z, a), 1e-6);
  EXPECT_NE(ddim_sample(cond, shape, {5, 0.0}, 18, s, predictor), ddim_sample(cond, shape, {5, 0.0}, 17, s, predictor));
}

TEST(Diffusion, EtaOneUsesNoise) {
  const auto s = build_schedule(100);
  auto zero = [](const Tensor<double>& z, int, const Tensor<double>&) { return Tensor<double>(z.shape()); };
  const Tensor<double> cond({1, 1, 2, 2});
  const auto a = ddim_sample(cond, {1, 1, 2, 2}, {10, 1.0}, 3, s, zero);
  EXPECT_EQ(ddim_sample(cond, {1, 1, 2, 2}, {10, 1.0}, 3, s, zero), a);
  EXPECT_NE(ddim_sample(cond, {1, 1, 2, 2}, {10, 0.0}, 3, s, zero), a);
}

TEST(Diffusion, LdmLossOraclePredictors) {
  const auto s = build_schedule();
  Rng rng(5);
  const auto z0 = Tensor<double>::randn({4, 3, 8, 8}, rng), eps = Tensor<double>::randn({4, 3, 8, 8}, rng);
  const Var<double> cond(Tensor<double>({4, 3, 8, 8}));
  const std::vector<int> t{1, 250, 700, 1000};
  auto exact = [&](const Var<double>&, const std::vector<int>&, const Var<double>&) { return Var<double>(eps); };
  EXPECT_EQ(ldm_loss(z0, cond, t, eps, s, exact).value()[0], 0.0);
  const auto big = Tensor<double>::randn({4, 3, 64, 64}, rng);
  auto zero = [](const Var<double>& z, const std::vector<int>&, const Var<double>&) {
    return Var<double>(Tensor<double>(z.shape()));
  };
  const double l = ldm_loss(Tensor<double>(big.shape()), Var<double>(Tensor<double>(big.shape())), t, big, s, zero).value()[0];
  EXPECT_NEAR(l, 1.0, 0.03);
  EXPECT_GE(l, 0.0);
}
