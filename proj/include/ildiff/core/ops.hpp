#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "ildiff/core/autograd.hpp"

// Differentiable operations on Var<T>. Image tensors are NCHW.
namespace ildiff::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
Node<T>& parent(Node<T>& self, std::size_t i) {
  return *self.parents[i];
}

// Elementwise op with derivative expressed from (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return Var<T>::make_result(std::move(y), {x}, [df](Node<T>& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(px.value[i], self.value[i]);
  });
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected NCHW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>(x.value());
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  return Var<T>::make_result(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& n = detail::parent(self, p);
      if (n.requires_grad) n.grad_buffer() += self.grad;
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  return Var<T>::make_result(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    auto& na = detail::parent(self, 0);
    auto& nb = detail::parent(self, 1);
    if (na.requires_grad) na.grad_buffer() += self.grad;
    if (nb.requires_grad) nb.grad_buffer() -= self.grad;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return Var<T>::make_result(std::move(y), {a, b}, [](Node<T>& self) {
    auto& na = detail::parent(self, 0);
    auto& nb = detail::parent(self, 1);
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

// sqrt(x + eps); eps keeps the derivative finite at zero.
template <typename T>
Var<T> sqrt_eps(const Var<T>& x, T eps) {
  return detail::unary(
      x, [eps](T v) { return std::sqrt(v + eps); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v, T) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > 0 ? v : T{0}; }, [](T v, T) { return v > 0 ? T{1} : T{0}; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > 0 ? v : slope * v; }, [slope](T v, T) { return v > 0 ? T{1} : slope; });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().values()) s += v;
  return Var<T>::make_result(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
    auto& px = detail::parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (auto& v : g.values()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

// Mean squared difference, a scalar.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value());
  const std::size_t n = a.value().size();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return Var<T>::make_result(Tensor<T>({1}, acc / static_cast<T>(n)), {a, b}, [n](Node<T>& self) {
    auto& na = detail::parent(self, 0);
    auto& nb = detail::parent(self, 1);
    const T k = T{2} * self.grad[0] / static_cast<T>(n);
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += k * (na.value[i] - nb.value[i]);
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= k * (na.value[i] - nb.value[i]);
    }
  });
}

// x[N,C,H,W] + v[N,C] broadcast over the spatial axes.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  detail::require_rank4(x.value(), "add_channel_bias");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (v.value().rank() != 2 || v.dim(0) != N || v.dim(1) != C)
    throw ShapeError("add_channel_bias: bias shape " + shape_str(v.shape()) + " incompatible with " +
                     shape_str(x.shape()));
  Tensor<T> y = x.value();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = y.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      const T b = v.value()[n * C + c];
      for (int i = 0; i < HW; ++i) p[i] += b;
    }
  return Var<T>::make_result(std::move(y), {x, v}, [N, C, HW](Node<T>& self) {
    auto& nx = detail::parent(self, 0);
    auto& nv = detail::parent(self, 1);
    if (nx.requires_grad) nx.grad_buffer() += self.grad;
    if (nv.requires_grad) {
      auto& g = nv.grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* p = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * HW;
          T s{0};
          for (int i = 0; i < HW; ++i) s += p[i];
          g[n * C + c] += s;
        }
    }
  });
}

// y[N,O] = x[N,F] W[O,F]^T + b[O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (w.dim(1) != F || b.dim(0) != O) throw ShapeError("linear: incompatible shapes");
  Tensor<T> y({N, O});
  MapMat<T> Y(y.data(), N, O);
  CMapMat<T> X(x.value().data(), N, F);
  CMapMat<T> W(w.value().data(), O, F);
  Y.noalias() = X * W.transpose();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) Y(n, o) += b.value()[o];
  return Var<T>::make_result(std::move(y), {x, w, b}, [N, F, O](Node<T>& self) {
    auto& nx = detail::parent(self, 0);
    auto& nw = detail::parent(self, 1);
    auto& nb = detail::parent(self, 2);
    CMapMat<T> G(self.grad.data(), N, O);
    if (nx.requires_grad) {
      MapMat<T> GX(nx.grad_buffer().data(), N, F);
      GX.noalias() += G * CMapMat<T>(nw.value.data(), O, F);
    }
    if (nw.requires_grad) {
      MapMat<T> GW(nw.grad_buffer().data(), O, F);
      GW.noalias() += G.transpose() * CMapMat<T>(nx.value.data(), N, F);
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gb[o] += G(n, o);
    }
  });
}

namespace detail {

struct ConvGeom {
  int N, C, H, W, O, k, stride, pad, Ho, Wo;
  int patch() const { return C * k * k; }
  int out_hw() const { return Ho * Wo; }
};

// Valid output-column range [lo, hi) for kernel column kj.
inline void valid_cols(const ConvGeom& g, int kj, int& lo, int& hi) {
  lo = 0;
  while (lo < g.Wo && lo * g.stride - g.pad + kj < 0) ++lo;
  hi = g.Wo;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kj >= g.W) --hi;
}

// Unfolds one image into rows of a [patch, ld] column matrix starting at
// column offset 0 of `cols`.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols, std::size_t ld) {
  for (int c = 0; c < g.C; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        const T* plane = x + static_cast<std::size_t>(c) * g.H * g.W;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        for (int oh = 0; oh < g.Ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          T* r = row + oh * g.Wo;
          if (ih < 0 || ih >= g.H) {
            std::fill(r, r + g.Wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.W - g.pad + kj;
          std::fill(r, r + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, r + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) r[ow] = src[ow * g.stride];
          }
          std::fill(r + hi, r + g.Wo, T{0});
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx, std::size_t ld) {
  for (int c = 0; c < g.C; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        T* plane = dx + static_cast<std::size_t>(c) * g.H * g.W;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        for (int oh = 0; oh < g.Ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.H) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.W - g.pad + kj;
          const T* r = row + oh * g.Wo;
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow] += r[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride] += r[ow];
          }
        }
      }
}

// Grow-only scratch buffers, one pair per thread and scalar type.
template <typename T>
T* workspace(int slot, std::size_t n) {
  thread_local AlignedVector<T> bufs[3];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Gathers the batch into one [patch, N*L] matrix so each layer is one GEMM.
template <typename T>
const T* unfold_batch(const T* x, const ConvGeom& g, bool direct, int slot) {
  const std::size_t L = g.out_hw(), NL = L * g.N, P = g.patch();
  T* cols = workspace<T>(slot, P * NL);
  for (int n = 0; n < g.N; ++n) {
    const T* xn = x + static_cast<std::size_t>(n) * g.C * g.H * g.W;
    if (direct) {
      for (std::size_t p = 0; p < P; ++p) std::copy(xn + p * L, xn + (p + 1) * L, cols + p * NL + n * L);
    } else {
      im2col(xn, g, cols + n * L, NL);
    }
  }
  return cols;
}

}  // namespace detail

// 2-D cross-correlation. w is [O, C, k, k]; b is [O] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  detail::require_rank4(x.value(), "conv2d");
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  if (w.dim(1) != g.C || w.dim(3) != g.k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  g.Ho = (g.H + 2 * pad - g.k) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.k) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw ShapeError("conv2d: input too small for kernel");
  const bool direct = g.k == 1 && stride == 1 && pad == 0;
  const int P = g.patch(), L = g.out_hw(), NL = L * g.N;
  Tensor<T> y({g.N, g.O, g.Ho, g.Wo});
  {
    const T* cols = detail::unfold_batch(x.value().data(), g, direct, 0);
    T* out = detail::workspace<T>(1, static_cast<std::size_t>(g.O) * NL);
    MapMat<T> Y(out, g.O, NL);
    Y.noalias() = CMapMat<T>(w.value().data(), g.O, P) * CMapMat<T>(cols, P, NL);
    for (int n = 0; n < g.N; ++n)
      for (int o = 0; o < g.O; ++o) {
        const T bias = b.defined() ? b.value()[o] : T{0};
        const T* src = out + static_cast<std::size_t>(o) * NL + static_cast<std::size_t>(n) * L;
        T* dst = y.data() + (static_cast<std::size_t>(n) * g.O + o) * L;
        for (int i = 0; i < L; ++i) dst[i] = src[i] + bias;
      }
  }
  const bool has_bias = b.defined();
  auto backward_fn = [g, direct, has_bias](Node<T>& self) {
    auto& nx = detail::parent(self, 0);
    auto& nw = detail::parent(self, 1);
    Node<T>* nb = has_bias ? &detail::parent(self, 2) : nullptr;
    const int P = g.patch(), L = g.out_hw(), NL = L * g.N;
    // Output gradient rearranged to [O, N*L].
    T* gm = detail::workspace<T>(1, static_cast<std::size_t>(g.O) * NL);
    for (int n = 0; n < g.N; ++n)
      for (int o = 0; o < g.O; ++o) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * g.O + o) * L;
        std::copy(src, src + L, gm + static_cast<std::size_t>(o) * NL + static_cast<std::size_t>(n) * L);
      }
    CMapMat<T> G(gm, g.O, NL);
    if (nb && nb->requires_grad) {
      auto& gb = nb->grad_buffer();
      for (int o = 0; o < g.O; ++o) gb[o] += G.row(o).sum();
    }
    if (nw.requires_grad) {
      const T* cols = detail::unfold_batch(nx.value.data(), g, direct, 0);
      MapMat<T> GW(nw.grad_buffer().data(), g.O, P);
      GW.noalias() += G * CMapMat<T>(cols, P, NL).transpose();
    }
    if (nx.requires_grad) {
      T* dcols = detail::workspace<T>(2, static_cast<std::size_t>(P) * NL);
      MapMat<T> DC(dcols, P, NL);
      DC.noalias() = CMapMat<T>(nw.value.data(), g.O, P).transpose() * G;
      T* dx = nx.grad_buffer().data();
      for (int n = 0; n < g.N; ++n) {
        T* dxn = dx + static_cast<std::size_t>(n) * g.C * g.H * g.W;
        if (direct) {
          for (int p = 0; p < P; ++p) {
            const T* src = dcols + static_cast<std::size_t>(p) * NL + static_cast<std::size_t>(n) * L;
            T* dst = dxn + static_cast<std::size_t>(p) * L;
            for (int i = 0; i < L; ++i) dst[i] += src[i];
          }
        } else {
          detail::col2im_add(dcols + static_cast<std::size_t>(n) * L, g, dxn, NL);
        }
      }
    }
  };
  if (has_bias) return Var<T>::make_result(std::move(y), {x, w, b}, backward_fn);
  return Var<T>::make_result(std::move(y), {x, w}, backward_fn);
}

// Group normalization over (C/groups, H, W) with per-channel affine.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  detail::require_rank4(x.value(), "group_norm");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cg = C / groups;
  const std::size_t M = static_cast<std::size_t>(cg) * HW;
  Tensor<T> y(x.shape());
  auto xhat = std::make_shared<AlignedVector<T>>(x.value().size());
  auto inv_std = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(N) * groups);
  for (int n = 0; n < N; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + gi * cg) * HW;
      const T* xp = x.value().data() + base;
      T mu{0};
      for (std::size_t i = 0; i < M; ++i) mu += xp[i];
      mu /= static_cast<T>(M);
      T var{0};
      for (std::size_t i = 0; i < M; ++i) var += (xp[i] - mu) * (xp[i] - mu);
      var /= static_cast<T>(M);
      const T is = T{1} / std::sqrt(var + eps);
      (*inv_std)[n * groups + gi] = is;
      for (int c = 0; c < cg; ++c) {
        const int ch = gi * cg + c;
        const T ga = gamma.value()[ch], be = beta.value()[ch];
        for (int i = 0; i < HW; ++i) {
          const std::size_t idx = base + static_cast<std::size_t>(c) * HW + i;
          const T xh = (x.value()[idx] - mu) * is;
          (*xhat)[idx] = xh;
          y[idx] = ga * xh + be;
        }
      }
    }
  return Var<T>::make_result(
      std::move(y), {x, gamma, beta}, [N, C, HW, groups, cg, M, xhat, inv_std](Node<T>& self) {
        auto& nx = detail::parent(self, 0);
        auto& ng = detail::parent(self, 1);
        auto& nbt = detail::parent(self, 2);
        const T* gy = self.grad.data();
        if (ng.requires_grad || nbt.requires_grad) {
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
              T sg{0}, sb{0};
              for (int i = 0; i < HW; ++i) {
                sg += gy[base + i] * (*xhat)[base + i];
                sb += gy[base + i];
              }
              if (ng.requires_grad) ng.grad_buffer()[c] += sg;
              if (nbt.requires_grad) nbt.grad_buffer()[c] += sb;
            }
        }
        if (!nx.requires_grad) return;
        auto& gx = nx.grad_buffer();
        for (int n = 0; n < N; ++n)
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + gi * cg) * HW;
            T m1{0}, m2{0};
            for (int c = 0; c < cg; ++c) {
              const T ga = ng.value[gi * cg + c];
              for (int i = 0; i < HW; ++i) {
                const std::size_t idx = base + static_cast<std::size_t>(c) * HW + i;
                const T d = gy[idx] * ga;
                m1 += d;
                m2 += d * (*xhat)[idx];
              }
            }
            m1 /= static_cast<T>(M);
            m2 /= static_cast<T>(M);
            const T is = (*inv_std)[n * groups + gi];
            for (int c = 0; c < cg; ++c) {
              const T ga = ng.value[gi * cg + c];
              for (int i = 0; i < HW; ++i) {
                const std::size_t idx = base + static_cast<std::size_t>(c) * HW + i;
                gx[idx] += is * (gy[idx] * ga - m1 - (*xhat)[idx] * m2);
              }
            }
          }
      });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank4(a.value(), "concat_channels");
  detail::require_rank4(b.value(), "concat_channels");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  if (b.dim(0) != N || b.dim(2) != H || b.dim(3) != W)
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Tensor<T> y({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, y.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, y.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return Var<T>::make_result(std::move(y), {a, b}, [N, Ca, Cb, HW](Node<T>& self) {
    auto& na = detail::parent(self, 0);
    auto& nb = detail::parent(self, 1);
    for (int n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * (Ca + Cb) * HW;
      if (na.requires_grad) {
        T* d = na.grad_buffer().data() + n * Ca * HW;
        for (std::size_t i = 0; i < Ca * HW; ++i) d[i] += g[i];
      }
      if (nb.requires_grad) {
        T* d = nb.grad_buffer().data() + n * Cb * HW;
        for (std::size_t i = 0; i < Cb * HW; ++i) d[i] += g[Ca * HW + i];
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  detail::require_rank4(x.value(), "upsample_nearest2x");
  const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (int p = 0; p < NC; ++p)
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j)
        y[(static_cast<std::size_t>(p) * 2 * H + i) * 2 * W + j] =
            x.value()[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2];
  return Var<T>::make_result(std::move(y), {x}, [NC, H, W](Node<T>& self) {
    auto& nx = detail::parent(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.grad_buffer();
    for (int p = 0; p < NC; ++p)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j)
          g[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2] +=
              self.grad[(static_cast<std::size_t>(p) * 2 * H + i) * 2 * W + j];
  });
}

// Inverted dropout. Identity when p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  auto mask = std::make_shared<AlignedVector<T>>(x.value().size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? T{0} : keep_scale;
    y[i] = x.value()[i] * (*mask)[i];
  }
  return Var<T>::make_result(std::move(y), {x}, [mask](Node<T>& self) {
    auto& nx = detail::parent(self, 0);
    if (!nx.requires_grad) return;
    auto& g = nx.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// Rows of table[K, D] gathered at indices (one per n,h,w) into [N, D, h, w].
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& indices, int N, int h, int w) {
  const int D = table.dim(1);
  const std::size_t HW = static_cast<std::size_t>(h) * w;
  if (indices.size() != N * HW) throw ShapeError("gather_rows: index count mismatch");
  Tensor<T> y({N, D, h, w});
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const int k = indices[n * HW + p];
      for (int d = 0; d < D; ++d) y[(n * D + d) * HW + p] = table.value()[static_cast<std::size_t>(k) * D + d];
    }
  auto idx = std::make_shared<std::vector<int>>(indices);
  return Var<T>::make_result(std::move(y), {table}, [idx, N, D, HW](Node<T>& self) {
    auto& nt = detail::parent(self, 0);
    if (!nt.requires_grad) return;
    auto& g = nt.grad_buffer();
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const int k = (*idx)[n * HW + p];
        for (int d = 0; d < D; ++d) g[static_cast<std::size_t>(k) * D + d] += self.grad[(n * D + d) * HW + p];
      }
  });
}

// Forward value of `quantized`, gradient routed unchanged to `continuous`.
template <typename T>
Var<T> straight_through(const Var<T>& continuous, const Tensor<T>& quantized) {
  continuous.value().check_same(quantized);
  return Var<T>::make_result(quantized, {continuous}, [](Node<T>& self) {
    auto& nc = detail::parent(self, 0);
    if (nc.requires_grad) nc.grad_buffer() += self.grad;
  });
}

// Multi-head scaled dot-product self-attention over spatial tokens.
// q, k, v are [N, C, H, W]; tokens are the H*W positions, features the C
// channels split evenly into `heads`.
template <typename T>
Var<T> spatial_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  detail::require_rank4(q.value(), "spatial_attention");
  q.value().check_same(k.value());
  q.value().check_same(v.value());
  const int N = q.dim(0), C = q.dim(1), L = q.dim(2) * q.dim(3);
  if (heads <= 0 || C % heads != 0) throw ConfigError("attention: channels not divisible by heads");
  const int dk = C / heads;
  const T scale_f = T{1} / std::sqrt(static_cast<T>(dk));
  auto probs = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(N) * heads * L * L);
  Tensor<T> y(q.shape());
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + h * dk) * L;
      CMapMat<T> Qt(q.value().data() + off, dk, L);
      CMapMat<T> Kt(k.value().data() + off, dk, L);
      CMapMat<T> Vt(v.value().data() + off, dk, L);
      MapMat<T> P(probs->data() + (static_cast<std::size_t>(n) * heads + h) * L * L, L, L);
      P.noalias() = (Qt.transpose() * Kt) * scale_f;
      for (int r = 0; r < L; ++r) {
        const T m = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - m).exp();
        P.row(r) /= P.row(r).sum();
      }
      MapMat<T> Ot(y.data() + off, dk, L);
      Ot.noalias() = Vt * P.transpose();
    }
  return Var<T>::make_result(std::move(y), {q, k, v}, [N, C, L, heads, dk, scale_f, probs](Node<T>& self) {
    auto& nq = detail::parent(self, 0);
    auto& nk = detail::parent(self, 1);
    auto& nv = detail::parent(self, 2);
    RowMat<T> dP(L, L), dS(L, L);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < heads; ++h) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + h * dk) * L;
        CMapMat<T> P(probs->data() + (static_cast<std::size_t>(n) * heads + h) * L * L, L, L);
        CMapMat<T> dOt(self.grad.data() + off, dk, L);
        CMapMat<T> Qt(nq.value.data() + off, dk, L);
        CMapMat<T> Kt(nk.value.data() + off, dk, L);
        CMapMat<T> Vt(nv.value.data() + off, dk, L);
        if (nv.requires_grad) {
          MapMat<T> dVt(nv.grad_buffer().data() + off, dk, L);
          dVt.noalias() += dOt * P;
        }
        if (!nq.requires_grad && !nk.requires_grad) continue;
        dP.noalias() = dOt.transpose() * Vt;
        for (int r = 0; r < L; ++r) {
          const T dot = (dP.row(r).array() * P.row(r).array()).sum();
          dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
        }
        dS *= scale_f;
        if (nq.requires_grad) {
          MapMat<T> dQt(nq.grad_buffer().data() + off, dk, L);
          dQt.noalias() += Kt * dS.transpose();
        }
        if (nk.requires_grad) {
          MapMat<T> dKt(nk.grad_buffer().data() + off, dk, L);
          dKt.noalias() += Qt * dS;
        }
      }
  });
}

}  // namespace ildiff::ops
