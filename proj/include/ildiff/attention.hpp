#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ildiff/core/tensor.hpp"

namespace ildiff {

// Multi-head scaled dot-product attention on token matrices Q [nq, d],
// K [nk, d], V [nk, dv]. Features are split into `heads` contiguous slices of
// d/heads (dv/heads for values); per head softmax(Q K^T / sqrt(d_k)) V, then
// heads are concatenated. If `weights` is given it receives [heads, nq, nk].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    std::vector<T>* weights = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("attention expects token matrices");
  const int nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  if (k.dim(1) != d || v.dim(0) != nk) throw ShapeError("attention: inconsistent Q/K/V shapes");
  if (heads < 1 || d % heads != 0 || dv % heads != 0)
    throw ConfigError("attention: feature dim not divisible by " + std::to_string(heads) + " heads");
  const int dk = d / heads, dh = dv / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  Tensor<T> out({nq, dv});
  if (weights) weights->assign(static_cast<std::size_t>(heads) * nq * nk, T{0});
  std::vector<T> s(static_cast<std::size_t>(nk));
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < nq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < nk; ++j) {
        T acc{0};
        for (int f = 0; f < dk; ++f) acc += q[i * d + h * dk + f] * k[j * d + h * dk + f];
        s[j] = acc * scale;
        mx = std::max(mx, s[j]);
      }
      T z{0};
      for (int j = 0; j < nk; ++j) z += (s[j] = std::exp(s[j] - mx));
      for (int j = 0; j < nk; ++j) {
        const T p = s[j] / z;
        if (weights) (*weights)[(static_cast<std::size_t>(h) * nq + i) * nk + j] = p;
        for (int f = 0; f < dh; ++f) out[i * dv + h * dh + f] += p * v[j * dv + h * dh + f];
      }
    }
  return out;
}

}  // namespace ildiff
