#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ildiff/core/optim.hpp"
#include "ildiff/dataset.hpp"
#include "ildiff/metrics.hpp"
#include "ildiff/pipeline/model.hpp"

namespace ildiff::pipeline {

// ---- augmentation -------------------------------------------------------

struct AugmentOptions {
  bool flip = true;
  bool rotate = true;
};

inline UltrasoundImage flip_image(const UltrasoundImage& im, bool horizontal) {
  const int H = im.height(), W = im.width();
  std::vector<double> px(static_cast<std::size_t>(H) * W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) px[static_cast<std::size_t>(r) * W + c] = horizontal ? im(r, W - 1 - c) : im(H - 1 - r, c);
  return UltrasoundImage(H, W, std::move(px));
}

// Counter-clockwise rotation by k quarter turns.
inline UltrasoundImage rotate90(const UltrasoundImage& im, int k) {
  k = ((k % 4) + 4) % 4;
  UltrasoundImage out = im;
  for (int i = 0; i < k; ++i) {
    const int H = out.height(), W = out.width();
    std::vector<double> px(static_cast<std::size_t>(H) * W);
    // new image is W x H; new(r, c) = old(c, W - 1 - r)
    for (int r = 0; r < W; ++r)
      for (int c = 0; c < H; ++c) px[static_cast<std::size_t>(r) * H + c] = out(c, W - 1 - r);
    out = UltrasoundImage(W, H, std::move(px));
  }
  return out;
}

struct AugmentDraw {
  bool flip_h = false, flip_v = false;
  int quarter_turns = 0;
};

// Odd quarter turns would change the shape of a non-square image, so those
// only draw from {0, 2}.
inline AugmentDraw draw_augment(Rng& rng, bool square, const AugmentOptions& opt) {
  AugmentDraw d;
  if (opt.flip) {
    d.flip_h = rng.bernoulli(0.5);
    d.flip_v = rng.bernoulli(0.5);
  }
  if (opt.rotate) d.quarter_turns = square ? static_cast<int>(rng.below(4)) : 2 * static_cast<int>(rng.below(2));
  return d;
}

inline UltrasoundImage apply_augment(const UltrasoundImage& im, const AugmentDraw& d) {
  UltrasoundImage out = im;
  if (d.flip_h) out = flip_image(out, true);
  if (d.flip_v) out = flip_image(out, false);
  if (d.quarter_turns) out = rotate90(out, d.quarter_turns);
  return out;
}

inline ImagePair augment(const ImagePair& pair, std::uint64_t seed, const AugmentOptions& opt = {}) {
  pair.validate();
  Rng rng(seed);
  const AugmentDraw d = draw_augment(rng, pair.clean.height() == pair.clean.width(), opt);
  ImagePair out = pair;
  out.contaminated = apply_augment(pair.contaminated, d);
  out.clean = apply_augment(pair.clean, d);
  return out;
}

// ---- shared training plumbing ------------------------------------------

struct TrainHooks {
  std::function<void(const std::string&)> log;
  // Called with every new best checkpoint (and nothing else).
  std::function<void(const Checkpoint&)> on_best;
};

struct TrainResult {
  Checkpoint best;
  std::vector<double> losses;                       // per step
  std::vector<std::pair<long long, double>> val;    // (step, metric)
};

struct ValCandidate {
  long long step = 0;
  double metric = 0.0;
};

// Index of the candidate with the highest metric; earliest wins ties.
inline std::size_t select_best(const std::vector<ValCandidate>& cands) {
  if (cands.empty()) throw StateError("no validation candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cands.size(); ++i)
    if (cands[i].metric > cands[best].metric) best = i;
  return best;
}

namespace detail {

inline void log(const TrainHooks& h, const std::string& s) {
  if (h.log) h.log(s);
}

// Learning rate for step i of n (1-based).
inline double scheduled_lr(double base, long long i, long long n, const std::string& kind) {
  if (kind != "cosine" || n <= 1) return base;
  const double floor = 0.01 * base;
  const double frac = static_cast<double>(i - 1) / static_cast<double>(n - 1);
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * frac));
}

inline std::vector<std::size_t> fixed_subsample(std::size_t n, int k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  idx.resize(std::min<std::size_t>(n, static_cast<std::size_t>(k)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
bool finite(const Var<T>& v) {
  for (T x : v.value().values())
    if (!std::isfinite(x)) return false;
  return true;
}

// Exponential moving average of the trainable (unfrozen) tensors.
template <typename T>
class WeightAverage {
 public:
  WeightAverage(nn::ParameterSet<T>& ps, double decay) : ps_(ps), decay_(decay) {
    if (decay_ <= 0.0) return;
    for (const auto& e : ps_.entries()) shadow_.push_back(e.frozen ? Tensor<T>() : e.var.value());
  }

  bool enabled() const { return decay_ > 0.0; }

  void update() {
    if (!enabled()) return;
    ++updates_;
    // Short warm-up so the average tracks early training instead of the init.
    const double d = std::min(decay_, (1.0 + updates_) / (10.0 + updates_));
    auto& es = ps_.entries();
    for (std::size_t i = 0; i < es.size(); ++i) {
      if (es[i].frozen) continue;
      auto& s = shadow_[i];
      const auto& w = es[i].var.value();
      for (std::size_t j = 0; j < s.size(); ++j) s[j] = static_cast<T>(d * s[j] + (1.0 - d) * w[j]);
    }
  }

  // Swaps live and averaged weights (call twice to undo).
  void swap() {
    if (!enabled()) return;
    auto& es = ps_.entries();
    for (std::size_t i = 0; i < es.size(); ++i)
      if (!es[i].frozen) std::swap(es[i].var.mutable_value().storage(), shadow_[i].storage());
  }

 private:
  nn::ParameterSet<T>& ps_;
  double decay_;
  std::vector<Tensor<T>> shadow_;
  long long updates_ = 0;
};

}  // namespace detail

// ---- stage 1: VQ-VAE ----------------------------------------------------

// Codebook rows get random encoder outputs (with a small jitter once the
// batch has fewer distinct vectors than rows).
template <typename T>
void seed_codebook_rows(Tensor<T>& codebook, const std::vector<int>& rows, const Tensor<T>& z_e, Rng& rng) {
  const int D = z_e.dim(1);
  const std::size_t HW = static_cast<std::size_t>(z_e.dim(2)) * z_e.dim(3);
  const std::size_t vectors = static_cast<std::size_t>(z_e.dim(0)) * HW;
  T spread{0};
  for (T v : z_e.values()) spread += v * v;
  spread = std::sqrt(spread / static_cast<T>(z_e.size()));
  const bool jitter = rows.size() > vectors;
  for (int k : rows) {
    const std::size_t pick = rng.below(vectors);
    const std::size_t n = pick / HW, p = pick % HW;
    for (int d = 0; d < D; ++d) {
      T v = z_e[(n * D + d) * HW + p];
      if (jitter) v += static_cast<T>(0.01 * rng.normal()) * spread;
      codebook[static_cast<std::size_t>(k) * D + d] = v;
    }
  }
}

template <typename T>
double reconstruction_mse(const LatentDiffusionModel<T>& m, const std::vector<UltrasoundImage>& images) {
  double s = 0.0;
  constexpr std::size_t chunk = 8;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    const std::vector<UltrasoundImage> part(images.begin() + i, images.begin() + std::min(images.size(), i + chunk));
    const auto rec = m.reconstruct(part);
    for (std::size_t j = 0; j < part.size(); ++j) s += metrics::mse(rec[j], part[j]);
  }
  return s / static_cast<double>(images.size());
}

// Mean standard deviation of the raw xi latent over a sample of images.
template <typename T>
double latent_std(const LatentDiffusionModel<T>& m, const std::vector<UltrasoundImage>& images) {
  NoGradGuard guard;
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < images.size(); i += 8) {
    const std::vector<UltrasoundImage> part(images.begin() + i, images.begin() + std::min(images.size(), i + 8));
    const Tensor<T> z = m.xi().forward(Var<T>(stack_images<T>(part))).value();
    for (T v : z.values()) s += v, s2 += static_cast<double>(v) * v, ++n;
  }
  const double mean = s / n;
  return std::sqrt(std::max(s2 / n - mean * mean, 1e-12));
}

// Forward pass and loss of the VQ-VAE on a batch [N,1,H,W].
template <typename T>
struct Stage1Forward {
  vq::VqLoss<T> loss;
  Var<T> x_hat;
  std::vector<int> indices;
};

template <typename T>
Stage1Forward<T> stage1_forward(const LatentDiffusionModel<T>& model, const Var<T>& x, const Var<T>& z_e,
                                const vq::VqLossWeights& wts, const vq::EdgeFeatures<T>& edges) {
  const auto q = vq::quantize(z_e.value(), model.codebook().value());
  const Var<T> z_q = ops::gather_rows(model.codebook(), q.indices, q.n, q.h, q.w);
  Stage1Forward<T> out;
  out.x_hat = model.decoder().forward(ops::straight_through(z_e, z_q.value()));
  const bool adversarial = wts.lambda_adversarial > 0.0;
  out.loss = vq::vqvae_loss(x, out.x_hat, z_e, z_q, wts, &edges, adversarial ? &model.discriminator() : nullptr);
  out.indices = q.indices;
  return out;
}

template <typename T>
Stage1Forward<T> stage1_forward(const LatentDiffusionModel<T>& model, const Tensor<T>& images) {
  const Var<T> x(images);
  const vq::EdgeFeatures<T> edges;
  return stage1_forward(model, x, model.xi().forward(x), model.config().loss_weights(), edges);
}

// Fills every codebook row from encoder outputs of a batch of images.
template <typename T>
void initialize_codebook(LatentDiffusionModel<T>& model, const Tensor<T>& images, std::uint64_t seed) {
  NoGradGuard guard;
  const Tensor<T> z_e = model.xi().forward(Var<T>(images)).value();
  std::vector<int> all(static_cast<std::size_t>(model.config().vqvae.codebook_size));
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
  Rng rng(seed);
  seed_codebook_rows(model.params().at("codebook.entries").var.mutable_value(), all, z_e, rng);
  model.set_codebook_ready(true);
}

// Trains xi, the decoder and the codebook on clean images. The returned
// checkpoint is the one with the lowest validation reconstruction MSE
// (val_metric stores the negated MSE so that larger is better throughout);
// the model is left holding those weights with the stage-1 tensors frozen.
template <typename T>
TrainResult train_stage1(LatentDiffusionModel<T>& model, const std::vector<UltrasoundImage>& train,
                         const std::vector<UltrasoundImage>& val, const TrainHooks& hooks = {},
                         std::optional<double> lr_override = std::nullopt, std::optional<int> steps_override = std::nullopt) {
  const RunConfig& cfg = model.config();
  if (train.empty()) throw DataError("stage 1: empty training set");
  const auto& val_set = val.empty() ? train : val;
  const auto val_idx = detail::fixed_subsample(val_set.size(), cfg.val_subsample, mix_seed(cfg.seed, 0xA1));
  std::vector<UltrasoundImage> val_images;
  for (auto i : val_idx) val_images.push_back(val_set[i]);

  auto& ps = model.params();
  for (auto& e : ps.entries()) {
    const bool stage1 = LatentDiffusionModel<T>::is_stage1_tensor(e.name);
    e.frozen = !stage1;
    e.var.set_requires_grad(stage1);
  }
  const double lr = lr_override.value_or(cfg.stage1_lr);
  const int steps = steps_override.value_or(cfg.stage1_steps);
  Adam<T> opt(ps, {lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
  std::optional<Adam<T>> disc_opt;
  const bool adversarial = cfg.vqvae_training.lambda_adversarial > 0.0;
  if (adversarial) disc_opt.emplace(model.disc_params(), AdamOptions{lr, 0.5, 0.9, 1e-8, cfg.grad_clip});
  const vq::VqLossWeights wts = cfg.loss_weights();
  const vq::EdgeFeatures<T> edges;
  const AugmentOptions aug{cfg.augment_flip, cfg.augment_rotate};
  Rng rng(mix_seed(cfg.seed, 0x5171));
  const int K = cfg.vqvae.codebook_size;
  std::vector<long long> last_used(K, 0);

  TrainResult res;
  bool have_best = false;
  auto validate_now = [&](long long step) {
    const double m = -reconstruction_mse(model, val_images);
    res.val.push_back({step, m});
    detail::log(hooks, "stage1 step " + std::to_string(step) + " val_recon_mse " + std::to_string(-m));
    if (!have_best || m > res.best.val_metric) {
      model.set_step(step);
      model.set_val_metric(m);
      model.set_stage(1);
      res.best = model.to_checkpoint();
      have_best = true;
      if (hooks.on_best) hooks.on_best(res.best);
    }
  };

  for (int step = 1; step <= steps; ++step) {
    std::vector<UltrasoundImage> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& im = train[rng.below(train.size())];
      batch.push_back(apply_augment(im, draw_augment(rng, im.height() == im.width(), aug)));
    }
    const Var<T> x(stack_images<T>(batch));
    const Var<T> z_e = model.xi().forward(x);
    if (!model.codebook_ready()) {
      std::vector<int> all(K);
      for (int k = 0; k < K; ++k) all[k] = k;
      seed_codebook_rows(model.params().at("codebook.entries").var.mutable_value(), all, z_e.value(), rng);
      model.set_codebook_ready(true);
    }
    Stage1Forward<T> fw = stage1_forward(model, x, z_e, wts, edges);
    const auto& loss = fw.loss;
    for (int idx : fw.indices) last_used[idx] = step;
    const Var<T>& x_hat = fw.x_hat;
    const double lv = loss.total.value()[0];
    if (!std::isfinite(lv)) throw TrainingError("stage 1 diverged at step " + std::to_string(step) + " (loss not finite)");
    res.losses.push_back(lv);
    ps.zero_grad();
    backward(loss.total);
    opt.set_lr(detail::scheduled_lr(lr, step, steps, cfg.lr_schedule));
    opt.step();
    if (adversarial) {
      model.disc_params().zero_grad();
      const auto& D = model.discriminator();
      const Var<T> dl = vq::hinge_discriminator_loss(D(x), D(ops::detach(x_hat)));
      backward(dl);
      disc_opt->set_lr(opt.lr());
      disc_opt->step();
    }

    std::vector<int> dead;
    for (int k = 0; k < K; ++k)
      if (step - last_used[k] >= cfg.vqvae_training.dead_code_steps) dead.push_back(k), last_used[k] = step;
    if (!dead.empty()) seed_codebook_rows(model.params().at("codebook.entries").var.mutable_value(), dead, z_e.value(), rng);

    if (step % cfg.log_every == 0 || step == 1)
      detail::log(hooks, "stage1 step " + std::to_string(step) + " loss " + std::to_string(lv) + " rec " +
                             std::to_string(loss.reconstruction) + " reseeded " + std::to_string(dead.size()));
    if (step % cfg.val_every == 0 || step == steps) validate_now(step);
  }

  // Keep the best weights, fix the latent scale and freeze the stage-1 tensors.
  model.load(res.best);
  std::vector<UltrasoundImage> scale_sample;
  for (auto i : detail::fixed_subsample(train.size(), 64, mix_seed(cfg.seed, 0xA2))) scale_sample.push_back(train[i]);
  model.set_latent_scale(1.0 / latent_std(model, scale_sample));
  for (auto& e : model.params().entries())
    if (LatentDiffusionModel<T>::is_stage1_tensor(e.name)) e.frozen = true, e.var.set_requires_grad(false);
  for (auto& e : model.params().entries())
    if (!LatentDiffusionModel<T>::is_stage1_tensor(e.name)) e.frozen = false, e.var.set_requires_grad(true);
  res.best = model.to_checkpoint();
  if (hooks.on_best) hooks.on_best(res.best);
  return res;
}

// ---- stage 2: condition encoder + noise predictor ------------------------

// psi starts as a copy of the trained xi.
template <typename T>
void init_psi_from_xi(LatentDiffusionModel<T>& model) {
  auto& ps = model.params();
  for (auto& e : ps.entries()) {
    if (e.name.rfind("psi.", 0) != 0) continue;
    e.var.mutable_value() = ps.at("xi." + e.name.substr(4)).var.value();
  }
}

template <typename T>
double validation_ssim(const LatentDiffusionModel<T>& m, const std::vector<ImagePair>& pairs, int K, std::uint64_t seed) {
  double s = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    s += metrics::ssim(m.denoise(pairs[i].contaminated, K, mix_seed(seed, i)), pairs[i].clean);
  return s / static_cast<double>(pairs.size());
}

// One noise-prediction loss evaluation on a batch; differentiable in psi and
// the U-Net. Shared by training and the overfit checks.
template <typename T>
Var<T> stage2_loss(const LatentDiffusionModel<T>& model, const std::vector<ImagePair>& batch, const std::vector<int>& t,
                   const Tensor<T>& eps, const nn::ForwardContext& ctx) {
  std::vector<UltrasoundImage> clean, contaminated;
  for (const auto& p : batch) clean.push_back(p.clean), contaminated.push_back(p.contaminated);
  const Tensor<T> z0 = model.clean_latent(stack_images<T>(clean));
  const Var<T> cond = model.condition(Var<T>(stack_images<T>(contaminated)));
  return diffusion::ldm_loss(z0, cond, t, eps, model.schedule(),
                             [&](const Var<T>& zt, const std::vector<int>& tt, const Var<T>& c) {
                               return model.unet().forward(zt, tt, c, ctx);
                             });
}

// Trains psi and the U-Net with xi/decoder/codebook frozen. Checkpoints are
// selected by mean K=5 validation SSIM on a fixed subsample.
template <typename T>
TrainResult train_stage2(LatentDiffusionModel<T>& model, const std::vector<ImagePair>& train,
                         const std::vector<ImagePair>& val, const TrainHooks& hooks = {},
                         std::optional<double> lr_override = std::nullopt, std::optional<int> steps_override = std::nullopt) {
  const RunConfig& cfg = model.config();
  if (model.stage() < 1 || !model.codebook_ready()) throw StateError("stage 2 needs a trained stage-1 checkpoint");
  if (train.empty()) throw DataError("stage 2: empty training set");
  if (model.stage() == 1) init_psi_from_xi(model);
  auto& ps = model.params();
  for (auto& e : ps.entries()) {
    const bool frozen = LatentDiffusionModel<T>::is_stage1_tensor(e.name);
    e.frozen = frozen;
    e.var.set_requires_grad(!frozen);
  }
  const auto& val_set = val.empty() ? train : val;
  std::vector<ImagePair> val_pairs;
  for (auto i : detail::fixed_subsample(val_set.size(), cfg.val_subsample, mix_seed(cfg.seed, 0xB1)))
    val_pairs.push_back(val_set[i]);
  const int val_k = 5 <= cfg.schedule.T ? 5 : cfg.schedule.T;
  const std::uint64_t val_seed = mix_seed(cfg.seed, 0xB2);

  const double lr = lr_override.value_or(cfg.stage2_lr);
  Adam<T> opt(ps, {lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
  detail::WeightAverage<T> ema(ps, cfg.ema_decay);
  const AugmentOptions aug{cfg.augment_flip, cfg.augment_rotate};
  Rng rng(mix_seed(cfg.seed, 0x5272));
  const int steps = steps_override.value_or(cfg.stage2_steps);
  const long long step0 = model.stage() == 2 ? model.step() : 0;

  TrainResult res;
  bool have_best = false;
  auto validate_now = [&](long long step) {
    ema.swap();
    const double m = validation_ssim(model, val_pairs, val_k, val_seed);
    res.val.push_back({step, m});
    detail::log(hooks, "stage2 step " + std::to_string(step) + " val_ssim_k5 " + std::to_string(m));
    if (!have_best || m > res.best.val_metric) {
      model.set_stage(2);
      model.set_step(step);
      model.set_val_metric(m);
      res.best = model.to_checkpoint();
      have_best = true;
      if (hooks.on_best) hooks.on_best(res.best);
    }
    ema.swap();
  };

  for (int i = 1; i <= steps; ++i) {
    const long long step = step0 + i;
    std::vector<ImagePair> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& p = train[rng.below(train.size())];
      const AugmentDraw d = draw_augment(rng, p.clean.height() == p.clean.width(), aug);
      ImagePair a = p;
      a.contaminated = apply_augment(p.contaminated, d);
      a.clean = apply_augment(p.clean, d);
      batch.push_back(std::move(a));
    }
    std::vector<int> t(batch.size());
    for (auto& ti : t) ti = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.schedule.T)));
    const int f = cfg.vqvae.factor();
    const Tensor<T> eps = Tensor<T>::randn(
        {static_cast<int>(batch.size()), cfg.vqvae.latent_dim, batch[0].clean.height() / f, batch[0].clean.width() / f}, rng);
    const nn::ForwardContext ctx{true, &rng};
    const Var<T> loss = stage2_loss(model, batch, t, eps, ctx);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw TrainingError("stage 2 diverged at step " + std::to_string(step) + " (loss not finite)");
    res.losses.push_back(lv);
    ps.zero_grad();
    backward(loss);
    opt.set_lr(detail::scheduled_lr(lr, i, steps, cfg.lr_schedule));
    opt.step();
    ema.update();
    if (i % cfg.log_every == 0 || i == 1)
      detail::log(hooks, "stage2 step " + std::to_string(step) + " loss " + std::to_string(lv));
    if (i % cfg.val_every == 0 || i == steps) validate_now(step);
  }
  model.load(res.best);
  return res;
}

}  // namespace ildiff::pipeline
