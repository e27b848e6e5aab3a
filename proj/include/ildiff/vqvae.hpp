#pragma once

#include <limits>
#include <string>
#include <vector>

#include "ildiff/core/nn.hpp"
#include "ildiff/image.hpp"

namespace ildiff::vq {

struct EncoderConfig {
  int base_channels = 64;
  std::vector<int> channel_multipliers{1, 2, 4};
  int latent_dim = 3;
  bool bottleneck_attention = true;
  int attention_head_dim = 32;
  int codebook_size = 8192;

  int downsamplings() const { return static_cast<int>(channel_multipliers.size()) - 1; }
  int factor() const { return 1 << downsamplings(); }
  int bottleneck_channels() const { return base_channels * channel_multipliers.back(); }

  void validate() const {
    if (channel_multipliers.size() < 2) throw ConfigError("encoder needs at least two channel multipliers");
    if (base_channels < 1 || latent_dim < 1) throw ConfigError("encoder widths must be >= 1");
    for (int m : channel_multipliers)
      if (m < 1) throw ConfigError("channel multipliers must be >= 1");
    if (bottleneck_attention && bottleneck_channels() % attention_head_dim != 0)
      throw ConfigError("bottleneck channels not divisible by attention head dim");
    if (codebook_size < 1) throw ConfigError("codebook size must be >= 1");
  }
};

// Latents are [N, latent_dim, H/4, W/4] tensors.
template <typename T>
using LatentGrid = Tensor<T>;

template <typename T>
struct QuantizedLatent {
  int n = 0, h = 0, w = 0;
  std::vector<int> indices;  // n * h * w, row-major per item
  Tensor<T> embedded;        // [n, dim, h, w]
};

inline void check_image_divisible(int height, int width, const EncoderConfig& cfg) {
  if (height % cfg.factor() != 0 || width % cfg.factor() != 0)
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by " +
                     std::to_string(cfg.factor()));
}

// Two ResNet blocks per level with a stride-2 convolution between levels,
// then a bottleneck (res, optional attention, res) and a projection to the
// latent channels. Used for both the clean encoder and the condition encoder.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int ch = cfg.base_channels * cfg.channel_multipliers[0];
    conv_in_ = nn::Conv2d<T>(ps, name + ".conv_in", 1, ch, 3, 1, rng);
    const int L = static_cast<int>(cfg.channel_multipliers.size());
    for (int i = 0; i < L; ++i) {
      const int out = cfg.base_channels * cfg.channel_multipliers[i];
      const std::string lvl = name + ".down" + std::to_string(i);
      blocks_.emplace_back(ps, lvl + ".res0", ch, out, 0, 0.0, rng);
      blocks_.emplace_back(ps, lvl + ".res1", out, out, 0, 0.0, rng);
      ch = out;
      if (i + 1 < L) downs_.emplace_back(ps, lvl + ".downsample", ch, rng);
    }
    mid1_ = nn::ResBlock<T>(ps, name + ".mid.res0", ch, ch, 0, 0.0, rng);
    if (cfg.bottleneck_attention) attn_ = nn::AttentionBlock<T>(ps, name + ".mid.attn", ch, cfg.attention_head_dim, rng);
    mid2_ = nn::ResBlock<T>(ps, name + ".mid.res1", ch, ch, 0, 0.0, rng);
    norm_out_ = nn::GroupNorm<T>(ps, name + ".norm_out", ch);
    conv_out_ = nn::Conv2d<T>(ps, name + ".conv_out", ch, cfg.latent_dim, 3, 1, rng);
  }

  // images: [N, 1, H, W] -> [N, latent_dim, H/f, W/f]
  Var<T> forward(const Var<T>& images) const {
    check_image_divisible(images.dim(2), images.dim(3), cfg_);
    const nn::ForwardContext ctx{};
    Var<T> h = conv_in_(images);
    for (std::size_t i = 0; i < blocks_.size(); i += 2) {
      h = blocks_[i](h, nullptr, ctx);
      h = blocks_[i + 1](h, nullptr, ctx);
      if (i / 2 < downs_.size()) h = downs_[i / 2](h);
    }
    h = mid1_(h, nullptr, ctx);
    if (cfg_.bottleneck_attention) h = attn_(h);
    h = mid2_(h, nullptr, ctx);
    return conv_out_(ops::silu(norm_out_(h)));
  }

  LatentGrid<T> encode(const UltrasoundImage& image) const {
    check_image_divisible(image.height(), image.width(), cfg_);
    NoGradGuard guard;
    return forward(Var<T>(image.to_tensor<T>())).value();
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  nn::Conv2d<T> conv_in_, conv_out_;
  std::vector<nn::ResBlock<T>> blocks_;
  std::vector<nn::Downsample<T>> downs_;
  nn::ResBlock<T> mid1_, mid2_;
  nn::AttentionBlock<T> attn_;
  nn::GroupNorm<T> norm_out_;
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int L = static_cast<int>(cfg.channel_multipliers.size());
    int ch = cfg.bottleneck_channels();
    conv_in_ = nn::Conv2d<T>(ps, name + ".conv_in", cfg.latent_dim, ch, 3, 1, rng);
    mid1_ = nn::ResBlock<T>(ps, name + ".mid.res0", ch, ch, 0, 0.0, rng);
    if (cfg.bottleneck_attention) attn_ = nn::AttentionBlock<T>(ps, name + ".mid.attn", ch, cfg.attention_head_dim, rng);
    mid2_ = nn::ResBlock<T>(ps, name + ".mid.res1", ch, ch, 0, 0.0, rng);
    for (int i = L - 1; i >= 0; --i) {
      const int out = cfg.base_channels * cfg.channel_multipliers[i];
      const std::string lvl = name + ".up" + std::to_string(i);
      blocks_.emplace_back(ps, lvl + ".res0", ch, out, 0, 0.0, rng);
      blocks_.emplace_back(ps, lvl + ".res1", out, out, 0, 0.0, rng);
      ch = out;
      if (i > 0) ups_.emplace_back(ps, lvl + ".upsample", ch, rng);
    }
    norm_out_ = nn::GroupNorm<T>(ps, name + ".norm_out", ch);
    conv_out_ = nn::Conv2d<T>(ps, name + ".conv_out", ch, 1, 3, 1, rng);
  }

  // latents: [N, latent_dim, h, w] -> [N, 1, f*h, f*w], unclamped.
  Var<T> forward(const Var<T>& latents) const {
    if (latents.value().rank() != 4 || latents.dim(1) != cfg_.latent_dim)
      throw ShapeError("decoder expects [N," + std::to_string(cfg_.latent_dim) + ",h,w], got " +
                       shape_str(latents.shape()));
    const nn::ForwardContext ctx{};
    Var<T> h = conv_in_(latents);
    h = mid1_(h, nullptr, ctx);
    if (cfg_.bottleneck_attention) h = attn_(h);
    h = mid2_(h, nullptr, ctx);
    for (std::size_t i = 0; i < blocks_.size(); i += 2) {
      h = blocks_[i](h, nullptr, ctx);
      h = blocks_[i + 1](h, nullptr, ctx);
      if (i / 2 < ups_.size()) h = ups_[i / 2](h);
    }
    // Output centered on mid-gray so an untrained decoder starts in range.
    return ops::add_scalar(conv_out_(ops::silu(norm_out_(h))), T(0.5));
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  nn::Conv2d<T> conv_in_, conv_out_;
  std::vector<nn::ResBlock<T>> blocks_;
  std::vector<nn::Upsample<T>> ups_;
  nn::ResBlock<T> mid1_, mid2_;
  nn::AttentionBlock<T> attn_;
  nn::GroupNorm<T> norm_out_;
};

// Nearest entry by squared Euclidean distance; ties go to the lowest index.
template <typename T>
QuantizedLatent<T> quantize(const LatentGrid<T>& z, const Tensor<T>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ConfigError("quantize: empty codebook");
  if (z.rank() != 4 || z.dim(1) != codebook.dim(1))
    throw ShapeError("quantize: latent channels " + shape_str(z.shape()) + " vs codebook dim " +
                     std::to_string(codebook.dim(1)));
  const int N = z.dim(0), D = z.dim(1), h = z.dim(2), w = z.dim(3), K = codebook.dim(0);
  const std::size_t HW = static_cast<std::size_t>(h) * w;
  QuantizedLatent<T> q{N, h, w, std::vector<int>(N * HW), Tensor<T>(z.shape())};
  std::vector<T> v(D);
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      for (int d = 0; d < D; ++d) v[d] = z[(n * D + d) * HW + p];
      int best = 0;
      T best_d = std::numeric_limits<T>::max();
      for (int k = 0; k < K; ++k) {
        const T* e = codebook.data() + static_cast<std::size_t>(k) * D;
        T dist{0};
        for (int d = 0; d < D; ++d) dist += (v[d] - e[d]) * (v[d] - e[d]);
        if (dist < best_d) best_d = dist, best = k;
      }
      q.indices[n * HW + p] = best;
      for (int d = 0; d < D; ++d) q.embedded[(n * D + d) * HW + p] = codebook[static_cast<std::size_t>(best) * D + d];
    }
  return q;
}

// Image-space decode of a quantized latent, clamped to [0, 1].
template <typename T>
std::vector<UltrasoundImage> decode(const QuantizedLatent<T>& q, const Decoder<T>& decoder) {
  NoGradGuard guard;
  const Tensor<T> out = decoder.forward(Var<T>(q.embedded)).value();
  std::vector<UltrasoundImage> images;
  for (int n = 0; n < out.dim(0); ++n) images.push_back(UltrasoundImage::from_tensor(out, n));
  return images;
}

struct VqLossWeights {
  double beta_commit = 0.25;
  double lambda_perceptual = 0.1;
  double lambda_adversarial = 0.0;  // 0 disables the adversarial term

  void validate() const {
    if (beta_commit < 0.0 || lambda_perceptual < 0.0 || lambda_adversarial < 0.0)
      throw ConfigError("VQ loss weights must be non-negative");
  }
};

template <typename T>
struct VqLoss {
  Var<T> total;
  // Raw (unweighted) terms.
  double reconstruction = 0, codebook = 0, commitment = 0, perceptual = 0, adversarial = 0;
  // Weighted contributions; they sum to total.
  double w_reconstruction = 0, w_codebook = 0, w_commitment = 0, w_perceptual = 0, w_adversarial = 0;
};

// Fixed (non-trainable) filters for the perceptual term: central differences
// followed by a 5-tap Gaussian blur of the gradient magnitude.
template <typename T>
class EdgeFeatures {
 public:
  EdgeFeatures() {
    Tensor<T> gx({1, 1, 3, 3}), gy({1, 1, 3, 3});
    gx.at(0, 0, 1, 0) = T(-0.5);
    gx.at(0, 0, 1, 2) = T(0.5);
    gy.at(0, 0, 0, 1) = T(-0.5);
    gy.at(0, 0, 2, 1) = T(0.5);
    const auto g = gaussian_kernel(1.0, 2);
    Tensor<T> blur({1, 1, 5, 5});
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) blur.at(0, 0, i, j) = static_cast<T>(g[i] * g[j]);
    gx_ = Var<T>(gx);
    gy_ = Var<T>(gy);
    blur_ = Var<T>(blur);
  }

  Var<T> operator()(const Var<T>& img) const {
    const Var<T> none;
    Var<T> dx = ops::conv2d(img, gx_, none, 1, 1);
    Var<T> dy = ops::conv2d(img, gy_, none, 1, 1);
    Var<T> mag = ops::sqrt_eps(ops::add(ops::square(dx), ops::square(dy)), T(1e-6));
    return ops::conv2d(mag, blur_, none, 1, 2);
  }

 private:
  Var<T> gx_, gy_, blur_;
};

// Small strided convolutional critic for the optional hinge adversarial term.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(nn::ParameterSet<T>& ps, const std::string& name, int channels, Rng& rng) {
    convs_.emplace_back(ps, name + ".conv0", 1, channels, 3, 2, rng);
    convs_.emplace_back(ps, name + ".conv1", channels, 2 * channels, 3, 2, rng);
    convs_.emplace_back(ps, name + ".conv2", 2 * channels, 4 * channels, 3, 2, rng);
    convs_.emplace_back(ps, name + ".conv3", 4 * channels, 1, 1, 1, rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = x;
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) h = ops::leaky_relu(convs_[i](h), T(0.2));
    return convs_.back()(h);
  }

  bool defined() const { return !convs_.empty(); }

 private:
  std::vector<nn::Conv2d<T>> convs_;
};

template <typename T>
Var<T> hinge_discriminator_loss(const Var<T>& real_logits, const Var<T>& fake_logits) {
  return ops::add(ops::mean(ops::relu(ops::scale(ops::add_scalar(real_logits, T(-1)), T(-1)))),
                  ops::mean(ops::relu(ops::add_scalar(fake_logits, T(1)))));
}

// total = rec + codebook + beta * commit + lambda_p * perceptual + lambda_a * adv
// with mean reductions. z_q is the gathered codebook rows (gradient flows to
// the codebook), z_e the encoder output.
template <typename T>
VqLoss<T> vqvae_loss(const Var<T>& x, const Var<T>& x_hat, const Var<T>& z_e, const Var<T>& z_q,
                     const VqLossWeights& wts, const EdgeFeatures<T>* edges = nullptr,
                     const Discriminator<T>* disc = nullptr) {
  wts.validate();
  x.value().check_same(x_hat.value());
  z_e.value().check_same(z_q.value());
  VqLoss<T> out;
  Var<T> rec = ops::mse(x_hat, x);
  Var<T> cb = ops::mse(ops::detach(z_e), z_q);
  Var<T> commit = ops::mse(z_e, ops::detach(z_q));
  out.reconstruction = rec.value()[0];
  out.codebook = cb.value()[0];
  out.commitment = commit.value()[0];
  out.w_reconstruction = out.reconstruction;
  out.w_codebook = out.codebook;
  Var<T> total = ops::add(rec, cb);
  Var<T> wc = ops::scale(commit, static_cast<T>(wts.beta_commit));
  out.w_commitment = wc.value()[0];
  total = ops::add(total, wc);
  if (wts.lambda_perceptual > 0.0) {
    const EdgeFeatures<T> local;
    const EdgeFeatures<T>& e = edges ? *edges : local;
    Var<T> perc = ops::mse(e(x_hat), e(x));
    out.perceptual = perc.value()[0];
    Var<T> wp = ops::scale(perc, static_cast<T>(wts.lambda_perceptual));
    out.w_perceptual = wp.value()[0];
    total = ops::add(total, wp);
  }
  if (wts.lambda_adversarial > 0.0) {
    if (!disc || !disc->defined()) throw ConfigError("adversarial weight set without a discriminator");
    Var<T> adv = ops::scale(ops::mean((*disc)(x_hat)), T(-1));
    out.adversarial = adv.value()[0];
    Var<T> wa = ops::scale(adv, static_cast<T>(wts.lambda_adversarial));
    out.w_adversarial = wa.value()[0];
    total = ops::add(total, wa);
  }
  out.total = total;
  return out;
}

}  // namespace ildiff::vq
