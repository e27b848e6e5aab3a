#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "ildiff/diffusion.hpp"
#include "ildiff/noise_predictor.hpp"
#include "ildiff/pipeline/checkpoint.hpp"
#include "ildiff/pipeline/config.hpp"
#include "ildiff/vqvae.hpp"

namespace ildiff::pipeline {

inline diffusion::NoiseSchedule schedule_for(const RunConfig& cfg) {
  return diffusion::build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

template <typename T>
Tensor<T> stack_images(const std::vector<UltrasoundImage>& images) {
  std::vector<Tensor<T>> items;
  items.reserve(images.size());
  for (const auto& im : images) items.push_back(im.template to_tensor<T>());
  return stack_batch<T>(items);
}

// Milliseconds spent in each phase of one denoising call.
struct DenoiseTiming {
  double encode_ms = 0, sampler_ms = 0, decode_ms = 0;
  double total_ms() const { return encode_ms + sampler_ms + decode_ms; }
};

// All trainable state of the two-stage model in one parameter store:
//   xi.*       clean-image encoder (stage 1, frozen in stage 2)
//   decoder.*  latent decoder      (stage 1, frozen in stage 2)
//   codebook.entries
//   psi.*      condition encoder   (stage 2)
//   unet.*     noise predictor     (stage 2)
// The optional discriminator lives in its own store and is never saved.
template <typename T>
class LatentDiffusionModel {
 public:
  explicit LatentDiffusionModel(const RunConfig& cfg) : cfg_(cfg), fingerprint_(fingerprint(cfg)), sched_(schedule_for(cfg)) {
    cfg.validate();
    if (cfg.precision != (std::is_same_v<T, float> ? "float" : "double"))
      throw ConfigError("model instantiated with a precision different from the config");
    Rng rng(mix_seed(cfg.seed, 0x51));
    xi_ = vq::Encoder<T>(ps_, "xi", cfg.vqvae, rng);
    decoder_ = vq::Decoder<T>(ps_, "decoder", cfg.vqvae, rng);
    codebook_ = ps_.add("codebook.entries",
                        Tensor<T>::randn({cfg.vqvae.codebook_size, cfg.vqvae.latent_dim}, rng, T(0.1)));
    psi_ = vq::Encoder<T>(ps_, "psi", cfg.vqvae, rng);
    unet_ = unet::UNet<T>(ps_, "unet", cfg.unet, rng);
    if (cfg.vqvae_training.lambda_adversarial > 0.0)
      disc_ = vq::Discriminator<T>(disc_ps_, "disc", cfg.vqvae_training.discriminator_channels, rng);
  }

  LatentDiffusionModel(const LatentDiffusionModel&) = delete;
  LatentDiffusionModel& operator=(const LatentDiffusionModel&) = delete;

  // Restores a model from a checkpoint taken under the same config.
  static std::unique_ptr<LatentDiffusionModel> from_checkpoint(const RunConfig& cfg, const Checkpoint& ck) {
    auto m = std::make_unique<LatentDiffusionModel>(cfg);
    m->load(ck);
    return m;
  }

  void load(const Checkpoint& ck) {
    if (ck.fingerprint != fingerprint_)
      throw StateError("checkpoint fingerprint " + ck.fingerprint + " does not match config " + fingerprint_);
    restore_tensors(ps_, ck);
    stage_ = ck.stage;
    step_ = ck.step;
    val_metric_ = ck.val_metric;
    latent_scale_ = ck.metadata.value("latent_scale", 1.0);
    codebook_ready_ = ck.metadata.value("codebook_initialized", ck.stage >= 1);
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.fingerprint = fingerprint_;
    ck.stage = stage_;
    ck.step = step_;
    ck.val_metric = val_metric_;
    ck.metadata["latent_scale"] = latent_scale_;
    ck.metadata["codebook_initialized"] = codebook_ready_;
    ck.metadata["config"] = to_json(cfg_);
    ck.tensors = snapshot_tensors(ps_);
    return ck;
  }

  // ---- inference -------------------------------------------------------

  // Scaled continuous xi latent of clean images [N,1,H,W].
  Tensor<T> clean_latent(const Tensor<T>& images) const {
    NoGradGuard guard;
    return xi_.forward(Var<T>(images)).value() * static_cast<T>(latent_scale_);
  }

  // Scaled psi latent (the diffusion condition); not quantized.
  Var<T> condition(const Var<T>& images) const {
    return ops::scale(psi_.forward(images), static_cast<T>(latent_scale_));
  }

  // Unscale, snap to the codebook and decode to [N,1,H,W] in [0,1].
  Tensor<T> decode_latent(const Tensor<T>& z) const {
    NoGradGuard guard;
    const auto q = vq::quantize(Tensor<T>(z * static_cast<T>(1.0 / latent_scale_)), codebook_.value());
    Tensor<T> out = decoder_.forward(Var<T>(q.embedded)).value();
    for (auto& v : out.values()) v = std::isnan(v) ? T(0) : std::clamp(v, T(0), T(1));
    return out;
  }

  Tensor<T> sample_latent(const Tensor<T>& cond, int K, std::uint64_t seed) const {
    const diffusion::SamplerConfig sc{K, cfg_.eta};
    return diffusion::ddim_sample<T>(cond, cond.shape(), sc, seed, sched_,
                                     [this](const Tensor<T>& z, int t, const Tensor<T>& c) {
                                       return unet_.predict_noise(z, t, c);
                                     });
  }

  // Full path for one contaminated image: psi -> DDIM -> quantize -> decode.
  UltrasoundImage denoise(const UltrasoundImage& contaminated, int K, std::uint64_t seed,
                          DenoiseTiming* timing = nullptr) const {
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a, clock::time_point b) {
      return std::chrono::duration<double, std::milli>(b - a).count();
    };
    vq::check_image_divisible(contaminated.height(), contaminated.width(), cfg_.vqvae);
    const auto t0 = clock::now();
    Tensor<T> cond;
    {
      NoGradGuard guard;
      cond = condition(Var<T>(contaminated.to_tensor<T>())).value();
    }
    const auto t1 = clock::now();
    const Tensor<T> z0 = sample_latent(cond, K, seed);
    const auto t2 = clock::now();
    const UltrasoundImage out = UltrasoundImage::from_tensor(decode_latent(z0));
    const auto t3 = clock::now();
    if (timing) *timing = {ms(t0, t1), ms(t1, t2), ms(t2, t3)};
    return out;
  }

  // Image i of a batch is sampled with seed mix_seed(seed, i), so results do
  // not depend on how a set is split into calls.
  std::vector<UltrasoundImage> denoise_all(const std::vector<UltrasoundImage>& inputs, int K, std::uint64_t seed,
                                           std::size_t first_index = 0) const {
    std::vector<UltrasoundImage> out;
    out.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(denoise(inputs[i], K, mix_seed(seed, first_index + i)));
    return out;
  }

  // Decoder output for clean images through the quantized xi latent.
  std::vector<UltrasoundImage> reconstruct(const std::vector<UltrasoundImage>& images) const {
    NoGradGuard guard;
    const Tensor<T> x = stack_images<T>(images);
    const Tensor<T> z = xi_.forward(Var<T>(x)).value();
    const auto q = vq::quantize(z, codebook_.value());
    return vq::decode(q, decoder_);
  }

  // ---- accessors -------------------------------------------------------

  const RunConfig& config() const { return cfg_; }
  const std::string& config_fingerprint() const { return fingerprint_; }
  const diffusion::NoiseSchedule& schedule() const { return sched_; }
  nn::ParameterSet<T>& params() { return ps_; }
  const nn::ParameterSet<T>& params() const { return ps_; }
  nn::ParameterSet<T>& disc_params() { return disc_ps_; }
  const vq::Encoder<T>& xi() const { return xi_; }
  const vq::Encoder<T>& psi() const { return psi_; }
  const vq::Decoder<T>& decoder() const { return decoder_; }
  const Var<T>& codebook() const { return codebook_; }
  const unet::UNet<T>& unet() const { return unet_; }
  const vq::Discriminator<T>& discriminator() const { return disc_; }

  int stage() const { return stage_; }
  void set_stage(int s) { stage_ = s; }
  long long step() const { return step_; }
  void set_step(long long s) { step_ = s; }
  double val_metric() const { return val_metric_; }
  void set_val_metric(double v) { val_metric_ = v; }
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw TrainingError("latent scale must be positive and finite");
    latent_scale_ = s;
  }
  bool codebook_ready() const { return codebook_ready_; }
  void set_codebook_ready(bool r) { codebook_ready_ = r; }

  // Tensors of the first stage (frozen during the second).
  static bool is_stage1_tensor(const std::string& name) {
    return name.rfind("xi.", 0) == 0 || name.rfind("decoder.", 0) == 0 || name.rfind("codebook.", 0) == 0;
  }

 private:
  RunConfig cfg_;
  std::string fingerprint_;
  diffusion::NoiseSchedule sched_;
  nn::ParameterSet<T> ps_, disc_ps_;
  vq::Encoder<T> xi_, psi_;
  vq::Decoder<T> decoder_;
  Var<T> codebook_;
  unet::UNet<T> unet_;
  vq::Discriminator<T> disc_;
  int stage_ = 0;
  long long step_ = 0;
  double val_metric_ = 0.0;
  double latent_scale_ = 1.0;
  bool codebook_ready_ = false;
};

}  // namespace ildiff::pipeline
