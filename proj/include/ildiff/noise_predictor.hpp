#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "ildiff/core/nn.hpp"

namespace ildiff::unet {

struct UNetConfig {
  int base_channels = 64;
  std::vector<int> channel_multipliers{1, 2, 2, 4};
  int num_res_blocks = 2;
  int attention_head_dim = 32;
  double dropout = 0.3;
  std::set<int> attention_levels{2, 3};  // indices into channel_multipliers
  bool mid_attention = true;
  int latent_channels = 3;
  int cond_channels = 3;
  int time_embed_dim = 0;  // 0: four times base_channels

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int time_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
  int min_latent_multiple() const { return 1 << (levels() - 1); }

  void validate() const {
    if (channel_multipliers.empty()) throw ConfigError("U-Net needs at least one level");
    if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("U-Net base channels must be even and >= 2");
    if (time_embed_dim < 0) throw ConfigError("time_embed_dim must be >= 0");
    if (num_res_blocks < 1) throw ConfigError("U-Net needs at least one res block per level");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("U-Net dropout must be in [0, 1)");
    for (int m : channel_multipliers)
      if (m < 1) throw ConfigError("channel multipliers must be >= 1");
    for (int l : attention_levels) {
      if (l < 0 || l >= levels()) throw ConfigError("attention level " + std::to_string(l) + " out of range");
      if ((base_channels * channel_multipliers[l]) % attention_head_dim != 0)
        throw ConfigError("attention level " + std::to_string(l) + " width not divisible by head dim");
    }
    if (mid_attention && (base_channels * channel_multipliers.back()) % attention_head_dim != 0)
      throw ConfigError("bottleneck width not divisible by head dim");
  }
};

// Sinusoidal timestep embedding: first half sin(t / 10000^(2i/dim)), second
// half cos of the same arguments.
template <typename T = double>
std::vector<T> time_embed(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("time embedding dim must be positive and even");
  const int half = dim / 2;
  std::vector<T> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double arg = t / std::pow(10000.0, 2.0 * i / dim);
    out[i] = static_cast<T>(std::sin(arg));
    out[half + i] = static_cast<T>(std::cos(arg));
  }
  return out;
}

// Condition-concatenating U-Net: input is [z_t, c] along channels, output the
// predicted noise with latent_channels channels.
template <typename T>
class UNet {
 public:
  UNet() = default;
  UNet(nn::ParameterSet<T>& ps, const std::string& name, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int tdim = cfg.time_dim();
    time1_ = nn::Linear<T>(ps, name + ".time.fc1", cfg.base_channels, tdim, rng);
    time2_ = nn::Linear<T>(ps, name + ".time.fc2", tdim, tdim, rng);
    int ch = cfg.base_channels * cfg.channel_multipliers[0];
    conv_in_ = nn::Conv2d<T>(ps, name + ".conv_in", cfg.latent_channels + cfg.cond_channels, ch, 3, 1, rng);
    std::vector<int> skip_ch{ch};
    const int L = cfg.levels();
    for (int i = 0; i < L; ++i) {
      const int out = cfg.base_channels * cfg.channel_multipliers[i];
      for (int r = 0; r < cfg.num_res_blocks; ++r) {
        const std::string nm = name + ".down" + std::to_string(i) + ".res" + std::to_string(r);
        Stage s;
        s.res = nn::ResBlock<T>(ps, nm, ch, out, tdim, cfg.dropout, rng);
        if (cfg.attention_levels.count(i))
          s.attn = nn::AttentionBlock<T>(ps, nm + ".attn", out, cfg.attention_head_dim, rng), s.has_attn = true;
        ch = out;
        down_.push_back(std::move(s));
        skip_ch.push_back(ch);
      }
      if (i + 1 < L) {
        downsample_.emplace_back(ps, name + ".down" + std::to_string(i) + ".downsample", ch, rng);
        skip_ch.push_back(ch);
      }
    }
    mid1_ = nn::ResBlock<T>(ps, name + ".mid.res0", ch, ch, tdim, cfg.dropout, rng);
    if (cfg.mid_attention) mid_attn_ = nn::AttentionBlock<T>(ps, name + ".mid.attn", ch, cfg.attention_head_dim, rng);
    mid2_ = nn::ResBlock<T>(ps, name + ".mid.res1", ch, ch, tdim, cfg.dropout, rng);
    for (int i = L - 1; i >= 0; --i) {
      const int out = cfg.base_channels * cfg.channel_multipliers[i];
      for (int r = 0; r <= cfg.num_res_blocks; ++r) {
        const std::string nm = name + ".up" + std::to_string(i) + ".res" + std::to_string(r);
        const int skip = skip_ch.back();
        skip_ch.pop_back();
        Stage s;
        s.res = nn::ResBlock<T>(ps, nm, ch + skip, out, tdim, cfg.dropout, rng);
        if (cfg.attention_levels.count(i))
          s.attn = nn::AttentionBlock<T>(ps, nm + ".attn", out, cfg.attention_head_dim, rng), s.has_attn = true;
        ch = out;
        up_.push_back(std::move(s));
      }
      if (i > 0) upsample_.emplace_back(ps, name + ".up" + std::to_string(i) + ".upsample", ch, rng);
    }
    norm_out_ = nn::GroupNorm<T>(ps, name + ".norm_out", ch);
    conv_out_ = nn::Conv2d<T>(ps, name + ".conv_out", ch, cfg.latent_channels, 3, 1, rng, 0.1);
  }

  // z_t, cond: [N, C, h, w]; t: one timestep per batch item.
  Var<T> forward(const Var<T>& z_t, const std::vector<int>& t, const Var<T>& cond, const nn::ForwardContext& ctx) const {
    const Shape& zs = z_t.shape();
    if (zs.size() != 4 || zs[1] != cfg_.latent_channels)
      throw ShapeError("U-Net: latent must be [N," + std::to_string(cfg_.latent_channels) + ",h,w], got " +
                       shape_str(zs));
    if (cond.value().rank() != 4 || cond.dim(1) != cfg_.cond_channels || cond.dim(0) != zs[0] ||
        cond.dim(2) != zs[2] || cond.dim(3) != zs[3])
      throw ShapeError("U-Net: condition " + shape_str(cond.shape()) + " does not match latent " + shape_str(zs));
    if (static_cast<int>(t.size()) != zs[0]) throw ShapeError("U-Net: one timestep per batch item required");
    const int m = cfg_.min_latent_multiple();
    if (zs[2] % m != 0 || zs[3] % m != 0)
      throw ShapeError("U-Net: latent size must be divisible by " + std::to_string(m));

    Tensor<T> sinus({zs[0], cfg_.base_channels});
    for (int n = 0; n < zs[0]; ++n) {
      const auto e = time_embed<T>(t[n], cfg_.base_channels);
      std::copy(e.begin(), e.end(), sinus.data() + static_cast<std::size_t>(n) * cfg_.base_channels);
    }
    const Var<T> temb = time2_(ops::silu(time1_(Var<T>(std::move(sinus)))));

    Var<T> h = conv_in_(ops::concat_channels(z_t, cond));
    std::vector<Var<T>> skips{h};
    std::size_t di = 0;
    for (int i = 0; i < cfg_.levels(); ++i) {
      for (int r = 0; r < cfg_.num_res_blocks; ++r, ++di) {
        h = down_[di].res(h, &temb, ctx);
        if (down_[di].has_attn) h = down_[di].attn(h);
        skips.push_back(h);
      }
      if (i + 1 < cfg_.levels()) {
        h = downsample_[i](h);
        skips.push_back(h);
      }
    }
    h = mid1_(h, &temb, ctx);
    if (cfg_.mid_attention) h = mid_attn_(h);
    h = mid2_(h, &temb, ctx);
    std::size_t ui = 0, us = 0;
    for (int i = cfg_.levels() - 1; i >= 0; --i) {
      for (int r = 0; r <= cfg_.num_res_blocks; ++r, ++ui) {
        h = up_[ui].res(ops::concat_channels(h, skips.back()), &temb, ctx);
        skips.pop_back();
        if (up_[ui].has_attn) h = up_[ui].attn(h);
      }
      if (i > 0) h = upsample_[us++](h);
    }
    return conv_out_(ops::silu(norm_out_(h)));
  }

  // Inference-mode noise prediction for a single timestep shared by the batch.
  Tensor<T> predict_noise(const Tensor<T>& z_t, int t, const Tensor<T>& cond) const {
    NoGradGuard guard;
    return forward(Var<T>(z_t), std::vector<int>(static_cast<std::size_t>(z_t.dim(0)), t), Var<T>(cond), {}).value();
  }

  const UNetConfig& config() const { return cfg_; }

 private:
  struct Stage {
    nn::ResBlock<T> res;
    nn::AttentionBlock<T> attn;
    bool has_attn = false;
  };

  UNetConfig cfg_;
  nn::Linear<T> time1_, time2_;
  nn::Conv2d<T> conv_in_, conv_out_;
  std::vector<Stage> down_, up_;
  std::vector<nn::Downsample<T>> downsample_;
  std::vector<nn::Upsample<T>> upsample_;
  nn::ResBlock<T> mid1_, mid2_;
  nn::AttentionBlock<T> mid_attn_;
  nn::GroupNorm<T> norm_out_;
};

}  // namespace ildiff::unet
