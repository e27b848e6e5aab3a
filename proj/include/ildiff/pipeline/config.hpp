#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildiff/dataset.hpp"
#include "ildiff/noise_predictor.hpp"
#include "ildiff/vqvae.hpp"

namespace ildiff::pipeline {

using Json = nlohmann::ordered_json;

// Synthetic data generation parameters (gen-data).
struct DatasetConfig {
  int sessions = 10;  // one group per session
  int cycles = 25;
  int frames_on = 3;
  int frames_off = 3;
  int n_inclusions = 2;
  double base_amplitude = 0.12;
  double fringe_frequency = 0.125;
  double broadband_sigma = 0.08;
  double psf_sigma_axial = 1.0;
  double psf_sigma_lateral = 1.5;
  double dynamic_range_db = 50.0;
  double scatterer_correlation = 0.8;
  std::string format = "ild";  // "ild" (raw floats) or "pgm"
};

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 0.0015;
  double beta_end = 0.0155;
};

struct VqvaeTraining {
  double beta_commit = 0.25;
  double lambda_perceptual = 0.1;
  double lambda_adversarial = 0.0;
  int discriminator_channels = 16;
  int dead_code_steps = 100;
};

struct RunConfig {
  std::string train_manifest = "data/train.jsonl";
  std::string validation_manifest = "data/validation.jsonl";
  std::string test_manifest = "data/test.jsonl";
  int image_size = 64;
  DatasetConfig dataset;
  vq::EncoderConfig vqvae;
  VqvaeTraining vqvae_training;
  unet::UNetConfig unet;
  ScheduleConfig schedule;
  int stage1_steps = 1500;
  double stage1_lr = 4.5e-6;
  int stage2_steps = 5500;
  double stage2_lr = 1.0e-6;
  int batch_size = 3;
  bool augment_flip = true;
  bool augment_rotate = true;
  std::vector<int> sampler_k{5, 30};
  double eta = 0.0;
  std::uint64_t seed = 0;
  std::string precision = "float";  // "float" or "double"
  int val_every = 250;
  int val_subsample = 16;
  int log_every = 50;
  double grad_clip = 1.0;
  double ema_decay = 0.0;  // 0 disables weight averaging in stage 2
  std::string lr_schedule = "constant";  // or "cosine": decay to 1% of the base rate

  vq::VqLossWeights loss_weights() const {
    return {vqvae_training.beta_commit, vqvae_training.lambda_perceptual, vqvae_training.lambda_adversarial};
  }

  void validate() const {
    if (!(stage1_lr > 0.0) || !(stage2_lr > 0.0)) throw ConfigError("learning rates must be > 0");
    if (stage1_steps < 1 || stage2_steps < 1) throw ConfigError("step counts must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (precision != "float" && precision != "double") throw ConfigError("precision must be \"float\" or \"double\"");
    if (val_every < 1 || val_subsample < 1 || log_every < 1) throw ConfigError("val_every/val_subsample/log_every must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0, 1)");
    if (lr_schedule != "constant" && lr_schedule != "cosine") throw ConfigError("lr_schedule must be constant or cosine");
    validate_image_dims(image_size, image_size);
    vqvae.validate();
    unet.validate();
    loss_weights().validate();
    if (vqvae_training.dead_code_steps < 1) throw ConfigError("dead_code_steps must be >= 1");
    if (unet.latent_channels != vqvae.latent_dim || unet.cond_channels != vqvae.latent_dim)
      throw ConfigError("U-Net latent/cond channels must equal the VQ-VAE latent_dim");
    if ((image_size / vqvae.factor()) % unet.min_latent_multiple() != 0)
      throw ConfigError("latent size " + std::to_string(image_size / vqvae.factor()) + " not divisible by U-Net factor " +
                        std::to_string(unet.min_latent_multiple()));
    if (sampler_k.empty()) throw ConfigError("sampler_k needs at least one entry");
    for (int k : sampler_k)
      if (k < 1 || k > schedule.T) throw ConfigError("sampler K " + std::to_string(k) + " outside [1, T]");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must be in [0, 1]");
    if (dataset.format != "ild" && dataset.format != "pgm") throw ConfigError("dataset.format must be ild or pgm");
  }
};

// ---- JSON mapping. Missing keys keep their defaults; unknown keys are errors.

namespace detail {

template <typename V>
void get(const nlohmann::json& j, const char* key, V& out, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& seen, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (std::find(seen.begin(), seen.end(), k) == seen.end()) throw ConfigError("unknown config key: " + where + k);
}

}  // namespace detail

inline Json to_json(const vq::EncoderConfig& c) {
  return {{"base_channels", c.base_channels},           {"channel_multipliers", c.channel_multipliers},
          {"latent_dim", c.latent_dim},                 {"bottleneck_attention", c.bottleneck_attention},
          {"attention_head_dim", c.attention_head_dim}, {"codebook_size", c.codebook_size}};
}

inline Json to_json(const unet::UNetConfig& c) {
  return {{"base_channels", c.base_channels},
          {"channel_multipliers", c.channel_multipliers},
          {"num_res_blocks", c.num_res_blocks},
          {"attention_head_dim", c.attention_head_dim},
          {"dropout", c.dropout},
          {"attention_levels", std::vector<int>(c.attention_levels.begin(), c.attention_levels.end())},
          {"mid_attention", c.mid_attention},
          {"time_embed_dim", c.time_embed_dim}};
}

inline Json to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  return {{"train_manifest", c.train_manifest},
          {"validation_manifest", c.validation_manifest},
          {"test_manifest", c.test_manifest},
          {"image_size", c.image_size},
          {"dataset",
           {{"sessions", d.sessions},
            {"cycles", d.cycles},
            {"frames_on", d.frames_on},
            {"frames_off", d.frames_off},
            {"n_inclusions", d.n_inclusions},
            {"base_amplitude", d.base_amplitude},
            {"fringe_frequency", d.fringe_frequency},
            {"broadband_sigma", d.broadband_sigma},
            {"psf_sigma_axial", d.psf_sigma_axial},
            {"psf_sigma_lateral", d.psf_sigma_lateral},
            {"dynamic_range_db", d.dynamic_range_db},
            {"scatterer_correlation", d.scatterer_correlation},
            {"format", d.format}}},
          {"vqvae", to_json(c.vqvae)},
          {"vqvae_training",
           {{"beta_commit", c.vqvae_training.beta_commit},
            {"lambda_perceptual", c.vqvae_training.lambda_perceptual},
            {"lambda_adversarial", c.vqvae_training.lambda_adversarial},
            {"discriminator_channels", c.vqvae_training.discriminator_channels},
            {"dead_code_steps", c.vqvae_training.dead_code_steps}}},
          {"unet", to_json(c.unet)},
          {"schedule", {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
          {"stage1_steps", c.stage1_steps},
          {"stage1_lr", c.stage1_lr},
          {"stage2_steps", c.stage2_steps},
          {"stage2_lr", c.stage2_lr},
          {"batch_size", c.batch_size},
          {"augment_flip", c.augment_flip},
          {"augment_rotate", c.augment_rotate},
          {"sampler_k", c.sampler_k},
          {"eta", c.eta},
          {"seed", c.seed},
          {"precision", c.precision},
          {"val_every", c.val_every},
          {"val_subsample", c.val_subsample},
          {"log_every", c.log_every},
          {"grad_clip", c.grad_clip},
          {"ema_decay", c.ema_decay},
          {"lr_schedule", c.lr_schedule}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::get;
  RunConfig c;
  std::vector<std::string> seen;
  get(j, "train_manifest", c.train_manifest, seen);
  get(j, "validation_manifest", c.validation_manifest, seen);
  get(j, "test_manifest", c.test_manifest, seen);
  get(j, "image_size", c.image_size, seen);
  seen.emplace_back("dataset");
  if (j.contains("dataset")) {
    const auto& s = j.at("dataset");
    auto& d = c.dataset;
    std::vector<std::string> ss;
    get(s, "sessions", d.sessions, ss);
    get(s, "cycles", d.cycles, ss);
    get(s, "frames_on", d.frames_on, ss);
    get(s, "frames_off", d.frames_off, ss);
    get(s, "n_inclusions", d.n_inclusions, ss);
    get(s, "base_amplitude", d.base_amplitude, ss);
    get(s, "fringe_frequency", d.fringe_frequency, ss);
    get(s, "broadband_sigma", d.broadband_sigma, ss);
    get(s, "psf_sigma_axial", d.psf_sigma_axial, ss);
    get(s, "psf_sigma_lateral", d.psf_sigma_lateral, ss);
    get(s, "dynamic_range_db", d.dynamic_range_db, ss);
    get(s, "scatterer_correlation", d.scatterer_correlation, ss);
    get(s, "format", d.format, ss);
    detail::reject_unknown(s, ss, "dataset.");
  }
  seen.emplace_back("vqvae");
  if (j.contains("vqvae")) {
    const auto& s = j.at("vqvae");
    auto& v = c.vqvae;
    std::vector<std::string> ss;
    get(s, "base_channels", v.base_channels, ss);
    get(s, "channel_multipliers", v.channel_multipliers, ss);
    get(s, "latent_dim", v.latent_dim, ss);
    get(s, "bottleneck_attention", v.bottleneck_attention, ss);
    get(s, "attention_head_dim", v.attention_head_dim, ss);
    get(s, "codebook_size", v.codebook_size, ss);
    detail::reject_unknown(s, ss, "vqvae.");
  }
  seen.emplace_back("vqvae_training");
  if (j.contains("vqvae_training")) {
    const auto& s = j.at("vqvae_training");
    auto& v = c.vqvae_training;
    std::vector<std::string> ss;
    get(s, "beta_commit", v.beta_commit, ss);
    get(s, "lambda_perceptual", v.lambda_perceptual, ss);
    get(s, "lambda_adversarial", v.lambda_adversarial, ss);
    get(s, "discriminator_channels", v.discriminator_channels, ss);
    get(s, "dead_code_steps", v.dead_code_steps, ss);
    detail::reject_unknown(s, ss, "vqvae_training.");
  }
  seen.emplace_back("unet");
  if (j.contains("unet")) {
    const auto& s = j.at("unet");
    auto& u = c.unet;
    std::vector<std::string> ss;
    std::vector<int> levels(u.attention_levels.begin(), u.attention_levels.end());
    get(s, "base_channels", u.base_channels, ss);
    get(s, "channel_multipliers", u.channel_multipliers, ss);
    get(s, "num_res_blocks", u.num_res_blocks, ss);
    get(s, "attention_head_dim", u.attention_head_dim, ss);
    get(s, "dropout", u.dropout, ss);
    get(s, "attention_levels", levels, ss);
    get(s, "mid_attention", u.mid_attention, ss);
    get(s, "time_embed_dim", u.time_embed_dim, ss);
    u.attention_levels = {levels.begin(), levels.end()};
    detail::reject_unknown(s, ss, "unet.");
  }
  seen.emplace_back("schedule");
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    std::vector<std::string> ss;
    get(s, "T", c.schedule.T, ss);
    get(s, "beta_start", c.schedule.beta_start, ss);
    get(s, "beta_end", c.schedule.beta_end, ss);
    detail::reject_unknown(s, ss, "schedule.");
  }
  get(j, "stage1_steps", c.stage1_steps, seen);
  get(j, "stage1_lr", c.stage1_lr, seen);
  get(j, "stage2_steps", c.stage2_steps, seen);
  get(j, "stage2_lr", c.stage2_lr, seen);
  get(j, "batch_size", c.batch_size, seen);
  get(j, "augment_flip", c.augment_flip, seen);
  get(j, "augment_rotate", c.augment_rotate, seen);
  get(j, "sampler_k", c.sampler_k, seen);
  get(j, "eta", c.eta, seen);
  get(j, "seed", c.seed, seen);
  get(j, "precision", c.precision, seen);
  get(j, "val_every", c.val_every, seen);
  get(j, "val_subsample", c.val_subsample, seen);
  get(j, "log_every", c.log_every, seen);
  get(j, "grad_clip", c.grad_clip, seen);
  get(j, "ema_decay", c.ema_decay, seen);
  get(j, "lr_schedule", c.lr_schedule, seen);
  detail::reject_unknown(j, seen, "");
  c.unet.latent_channels = c.unet.cond_channels = c.vqvae.latent_dim;
  c.validate();
  return c;
}

// Relative manifest paths in a config file resolve against the file's folder.
inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c = config_from_json(j);
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p, const char* key) {
    if (j.contains(key) && !p.empty() && std::filesystem::path(p).is_relative())
      p = (base / p).lexically_normal().string();
  };
  resolve(c.train_manifest, "train_manifest");
  resolve(c.validation_manifest, "validation_manifest");
  resolve(c.test_manifest, "test_manifest");
  return c;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// Identifies the model shape: everything that determines tensor names,
// shapes, dtype and the diffusion schedule. Training knobs are excluded so a
// stage-1 checkpoint loads under a config that only changes stage-2 settings.
inline std::string fingerprint(const RunConfig& c) {
  Json model{{"image_size", c.image_size},
                   {"vqvae", to_json(c.vqvae)},
                   {"discriminator", c.vqvae_training.lambda_adversarial > 0.0 ? c.vqvae_training.discriminator_channels : 0},
                   {"unet", to_json(c.unet)},
                   {"schedule", {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
                   {"precision", c.precision}};
  model["unet"].erase("dropout");
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(model.dump());
  return os.str();
}

}  // namespace ildiff::pipeline
