#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ildiff/core/ops.hpp"

namespace ildiff::nn {

// Named, ordered parameter store. Modules register their tensors here; the
// optimizer and the checkpoint code iterate over it.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool frozen = false;
  };

  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>(std::move(init), true), false});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const { return const_cast<ParameterSet*>(this)->at(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Freeze (or unfreeze) every parameter whose name starts with prefix.
  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) {
        e.frozen = frozen;
        e.var.set_requires_grad(!frozen);
      }
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.value().size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
};

// Largest group count <= 32 that leaves at least two channels per group.
inline int norm_groups(int channels) {
  for (int g : {32, 16, 8, 4, 2})
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <typename T>
Tensor<T> scaled_normal(Shape shape, int fan_in, Rng& rng, double gain = 1.0) {
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(gain / std::sqrt(static_cast<double>(fan_in))));
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng,
         double gain = 1.0)
      : stride_(stride), pad_(kernel / 2) {
    weight_ = ps.add(name + ".weight", scaled_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng, gain));
    bias_ = ps.add(name + ".bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }
  const Var<T>& weight() const { return weight_; }

 private:
  Var<T> weight_, bias_;
  int stride_ = 1, pad_ = 0;
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParameterSet<T>& ps, const std::string& name, int channels) : groups_(norm_groups(channels)) {
    gamma_ = ps.add(name + ".gamma", Tensor<T>({channels}, T{1}));
    beta_ = ps.add(name + ".beta", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, gamma_, beta_, groups_); }

 private:
  Var<T> gamma_, beta_;
  int groups_ = 1;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, int in, int out, Rng& rng) {
    weight_ = ps.add(name + ".weight", scaled_normal<T>({out, in}, in, rng));
    bias_ = ps.add(name + ".bias", Tensor<T>({out}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight_, bias_); }

 private:
  Var<T> weight_, bias_;
};

// Pre-activation residual block: GN -> SiLU -> conv -> (+time) -> GN -> SiLU
// -> dropout -> conv, plus a 1x1 projection on the skip when widths differ.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParameterSet<T>& ps, const std::string& name, int in, int out, int time_dim, double dropout, Rng& rng)
      : dropout_(dropout) {
    norm1_ = GroupNorm<T>(ps, name + ".norm1", in);
    conv1_ = Conv2d<T>(ps, name + ".conv1", in, out, 3, 1, rng);
    if (time_dim > 0) {
      time_proj_ = Linear<T>(ps, name + ".time_proj", time_dim, out, rng);
      has_time_ = true;
    }
    norm2_ = GroupNorm<T>(ps, name + ".norm2", out);
    conv2_ = Conv2d<T>(ps, name + ".conv2", out, out, 3, 1, rng, 0.5);
    if (in != out) {
      skip_ = Conv2d<T>(ps, name + ".skip", in, out, 1, 1, rng);
      has_skip_ = true;
    }
  }

  Var<T> operator()(const Var<T>& x, const Var<T>* time_emb, const ForwardContext& ctx) const {
    Var<T> h = conv1_(ops::silu(norm1_(x)));
    if (has_time_) {
      if (!time_emb) throw ShapeError("ResBlock: time embedding required");
      h = ops::add_channel_bias(h, time_proj_(ops::silu(*time_emb)));
    }
    h = ops::silu(norm2_(h));
    if (ctx.training && dropout_ > 0.0) h = ops::dropout(h, dropout_, *ctx.rng);
    h = conv2_(h);
    return ops::add(has_skip_ ? skip_(x) : x, h);
  }

 private:
  GroupNorm<T> norm1_, norm2_;
  Conv2d<T> conv1_, conv2_, skip_;
  Linear<T> time_proj_;
  double dropout_ = 0.0;
  bool has_time_ = false, has_skip_ = false;
};

// Residual multi-head self-attention over spatial positions. Head count is
// channels / head_dim.
template <typename T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParameterSet<T>& ps, const std::string& name, int channels, int head_dim, Rng& rng) {
    if (head_dim <= 0 || channels % head_dim != 0)
      throw ConfigError("attention block: channels " + std::to_string(channels) + " not divisible by head dim " +
                        std::to_string(head_dim));
    heads_ = channels / head_dim;
    norm_ = GroupNorm<T>(ps, name + ".norm", channels);
    q_ = Conv2d<T>(ps, name + ".q", channels, channels, 1, 1, rng);
    k_ = Conv2d<T>(ps, name + ".k", channels, channels, 1, 1, rng);
    v_ = Conv2d<T>(ps, name + ".v", channels, channels, 1, 1, rng);
    proj_ = Conv2d<T>(ps, name + ".proj", channels, channels, 1, 1, rng, 0.5);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = norm_(x);
    Var<T> a = ops::spatial_attention(q_(h), k_(h), v_(h), heads_);
    return ops::add(x, proj_(a));
  }

  int heads() const { return heads_; }

 private:
  GroupNorm<T> norm_;
  Conv2d<T> q_, k_, v_, proj_;
  int heads_ = 1;
};

template <typename T>
class Downsample {
 public:
  Downsample() = default;
  Downsample(ParameterSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : conv_(ps, name + ".conv", channels, channels, 3, 2, rng) {}
  Var<T> operator()(const Var<T>& x) const { return conv_(x); }

 private:
  Conv2d<T> conv_;
};

template <typename T>
class Upsample {
 public:
  Upsample() = default;
  Upsample(ParameterSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : conv_(ps, name + ".conv", channels, channels, 3, 1, rng) {}
  Var<T> operator()(const Var<T>& x) const { return conv_(ops::upsample_nearest2x(x)); }

 private:
  Conv2d<T> conv_;
};

}  // namespace ildiff::nn
