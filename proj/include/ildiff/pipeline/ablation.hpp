#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildiff/pipeline/bench.hpp"
#include "ildiff/pipeline/training.hpp"

namespace ildiff::pipeline {

inline const std::vector<int> kAblationTGrid{500, 1000, 2000};

struct AblationVariant {
  std::string name;
  RunConfig cfg;
};

struct AblationRow {
  std::string name;
  int T = 0;
  bool vqvae_attention = true, unet_attention = true;
  double ssim = 0, psnr = 0, ms_per_frame = 0;
};

inline RunConfig with_unet_attention(RunConfig c, bool on) {
  if (!on) {
    c.unet.attention_levels.clear();
    c.unet.mid_attention = false;
  }
  return c;
}

inline bool unet_has_attention(const RunConfig& c) { return c.unet.mid_attention || !c.unet.attention_levels.empty(); }

// The diffusion-step grid (T values) followed by the 2x2 attention grid.
// T values outside {500, 1000, 2000} are rejected unless allow_custom_t.
inline std::vector<AblationVariant> ablation_grid(const RunConfig& base, const std::vector<int>& t_grid = kAblationTGrid,
                                                  bool allow_custom_t = false, bool steps = true, bool attention = true) {
  std::vector<AblationVariant> out;
  if (steps)
    for (int T : t_grid) {
      if (!allow_custom_t && std::find(kAblationTGrid.begin(), kAblationTGrid.end(), T) == kAblationTGrid.end())
        throw ConfigError("ablation T must be one of 500, 1000, 2000 (use --t-grid to override), got " + std::to_string(T));
      RunConfig c = base;
      c.schedule.T = T;
      c.validate();
      out.push_back({"T=" + std::to_string(T), c});
    }
  if (attention)
    for (bool vq_attn : {true, false})
      for (bool unet_attn : {true, false}) {
        RunConfig c = with_unet_attention(base, unet_attn);
        c.vqvae.bottleneck_attention = vq_attn;
        c.validate();
        out.push_back({std::string("vqvae_attn=") + (vq_attn ? "on" : "off") + ",unet_attn=" + (unet_attn ? "on" : "off"), c});
      }
  return out;
}

// Copies the stage-1 tensors and latent scale of a checkpoint into a model
// whose VQ-VAE has the same architecture.
template <typename T>
void adopt_stage1(LatentDiffusionModel<T>& model, const Checkpoint& ck) {
  for (auto& e : model.params().entries()) {
    if (!LatentDiffusionModel<T>::is_stage1_tensor(e.name)) continue;
    const TensorRecord* r = ck.find(e.name);
    if (!r || r->shape != e.var.shape()) throw StateError("stage-1 checkpoint does not fit tensor " + e.name);
    e.var.mutable_value() = detail::decode_values<T>(*r);
    e.frozen = true;
    e.var.set_requires_grad(false);
  }
  model.set_latent_scale(ck.metadata.value("latent_scale", 1.0));
  model.set_codebook_ready(true);
  model.set_stage(1);
}

struct AblationData {
  std::vector<ImagePair> train, validation, test;
};

// Trains and scores every variant. Variants sharing a VQ-VAE architecture
// reuse one stage-1 run, since stage 1 does not depend on the schedule or the
// U-Net.
template <typename T>
std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const AblationData& data, int K,
                                      const TrainHooks& hooks = {}, int timing_frames = 8) {
  if (data.train.empty() || data.test.empty()) throw DataError("ablation needs training and test pairs");
  std::vector<UltrasoundImage> train_clean, val_clean, test_in, test_ref;
  for (const auto& p : data.train) train_clean.push_back(p.clean);
  for (const auto& p : data.validation) val_clean.push_back(p.clean);
  for (const auto& p : data.test) test_in.push_back(p.contaminated), test_ref.push_back(p.clean);

  std::map<std::string, Checkpoint> stage1_cache;
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    detail::log(hooks, "ablation variant " + v.name);
    LatentDiffusionModel<T> model(v.cfg);
    const std::string key = to_json(v.cfg.vqvae).dump();
    auto it = stage1_cache.find(key);
    if (it == stage1_cache.end()) {
      train_stage1(model, train_clean, val_clean, {hooks.log, nullptr});
      it = stage1_cache.emplace(key, model.to_checkpoint()).first;
    } else {
      adopt_stage1(model, it->second);
    }
    train_stage2(model, data.train, data.validation, {hooks.log, nullptr});
    const auto outputs = model.denoise_all(test_in, K, v.cfg.seed);
    const auto rep = metrics::evaluate_pairs(outputs, test_ref, {200, 0.95, v.cfg.seed});

    std::vector<UltrasoundImage> frames(test_in.begin(), test_in.begin() + std::min<std::size_t>(test_in.size(), timing_frames));
    const auto timing = bench_timing(model, frames, {K}, static_cast<int>(frames.size()), 1, v.cfg.seed);
    rows.push_back({v.name, v.cfg.schedule.T, v.cfg.vqvae.bottleneck_attention, unet_has_attention(v.cfg), rep.ssim_mean,
                    rep.psnr_mean, timing.per_k.front().total_ms});
  }
  return rows;
}

inline nlohmann::ordered_json to_json(const std::vector<AblationRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    arr.push_back({{"variant", r.name},
                   {"T", r.T},
                   {"vqvae_attention", r.vqvae_attention},
                   {"unet_attention", r.unet_attention},
                   {"SSIM", r.ssim},
                   {"PSNR", r.psnr},
                   {"ms_per_frame", r.ms_per_frame}});
  return arr;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "variant                              SSIM     PSNR    ms/frame\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-34s %7.4f %8.3f %10.2f\n", r.name.c_str(), r.ssim, r.psnr, r.ms_per_frame);
    out += buf;
  }
  return out;
}

}  // namespace ildiff::pipeline
