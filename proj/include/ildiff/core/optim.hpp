#pragma once

#include <cmath>
#include <vector>

#include "ildiff/core/nn.hpp"

namespace ildiff {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

// Adam over the non-frozen entries of a parameter set. Frozen entries are
// never touched, not even their moment buffers.
template <typename T>
class Adam {
 public:
  Adam(nn::ParameterSet<T>& params, AdamOptions opt) : params_(params), opt_(opt) {
    for (const auto& e : params_.entries()) {
      m_.emplace_back(e.var.shape());
      v_.emplace_back(e.var.shape());
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& e : params_.entries()) {
      if (e.frozen || e.var.grad().empty()) continue;
      for (T g : e.var.grad().values()) s += static_cast<double>(g) * g;
    }
    return std::sqrt(s);
  }

  void step() {
    ++t_;
    double clip = 1.0;
    if (opt_.max_grad_norm > 0.0) {
      const double n = grad_norm();
      if (n > opt_.max_grad_norm) clip = opt_.max_grad_norm / n;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    auto& entries = params_.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (e.frozen || e.var.grad().empty()) continue;
      auto& w = e.var.mutable_value();
      const auto& g = e.var.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        const double mj = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
        const double vj = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        w[j] -= static_cast<T>(opt_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opt_.eps));
      }
    }
  }

  long long steps() const { return t_; }

 private:
  nn::ParameterSet<T>& params_;
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace ildiff
