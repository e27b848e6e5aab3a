// Command-line front end: data generation, both training stages, denoising,
// the notch baseline, evaluation, entropy maps, timing and ablations.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ildiff/entropy.hpp"
#include "ildiff/metrics.hpp"
#include "ildiff/notch.hpp"
#include "ildiff/pipeline/ablation.hpp"
#include "ildiff/pipeline/bench.hpp"
#include "ildiff/pipeline/datagen.hpp"
#include "ildiff/pipeline/training.hpp"

namespace fs = std::filesystem;
using namespace ildiff;
using namespace ildiff::pipeline;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool quiet = false;
};

RunConfig resolve_config(const Globals& g, const Checkpoint* ck = nullptr) {
  RunConfig cfg;
  if (!g.config.empty())
    cfg = load_config(g.config);
  else if (ck && ck->metadata.contains("config"))
    cfg = config_from_json(ck->metadata.at("config"));
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

void log_line(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cerr << s << std::endl;
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return g.out;
}

std::vector<UltrasoundImage> clean_of(const std::vector<ImagePair>& p) {
  std::vector<UltrasoundImage> v;
  for (const auto& x : p) v.push_back(x.clean);
  return v;
}

std::vector<ImagePair> load_optional(const std::string& manifest) {
  if (manifest.empty() || !fs::exists(manifest)) return {};
  return load_pairs(manifest);
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) { io::detail::write_file(p, j.dump(2) + "\n"); }

// Inputs given either as files or as a manifest; references are the clean
// images of the manifest or the files passed with --reference.
struct InputSet {
  std::vector<fs::path> paths;
  std::vector<UltrasoundImage> images, references;
};

InputSet gather_inputs(const std::vector<std::string>& files, const std::string& manifest,
                       const std::vector<std::string>& refs) {
  InputSet in;
  if (!manifest.empty()) {
    if (!files.empty()) throw UsageError("give input files or --manifest, not both");
    const auto base = fs::path(manifest).parent_path();
    for (const auto& r : read_manifest(manifest)) {
      const fs::path pc = fs::path(r.path_contaminated).is_absolute() ? fs::path(r.path_contaminated) : base / r.path_contaminated;
      const fs::path pr = fs::path(r.path_clean).is_absolute() ? fs::path(r.path_clean) : base / r.path_clean;
      in.paths.push_back(pc);
      in.images.push_back(io::load_image(pc));
      in.references.push_back(io::load_image(pr));
    }
  } else {
    if (files.empty()) throw UsageError("no input images given");
    for (const auto& f : files) in.paths.emplace_back(f), in.images.push_back(io::load_image(f));
    if (!refs.empty()) {
      if (refs.size() != files.size()) throw UsageError("--reference count must match the number of inputs");
      for (const auto& r : refs) in.references.push_back(io::load_image(r));
    }
  }
  if (in.images.empty()) throw DataError("no input images found");
  return in;
}

fs::path suffixed(const fs::path& dir, const fs::path& input, const std::string& tag) {
  return dir / (input.stem().string() + "." + tag + input.extension().string());
}

template <typename T>
int train_vqvae(const Globals& g, const RunConfig& cfg) {
  const auto dir = out_dir(g);
  const auto train = load_pairs(cfg.train_manifest);
  const auto val = load_optional(cfg.validation_manifest);
  LatentDiffusionModel<T> model(cfg);
  const fs::path ck_path = dir / "stage1.ildc";
  TrainHooks hooks{[&](const std::string& s) { log_line(g, s); },
                   [&](const Checkpoint& ck) { save_checkpoint(ck, ck_path); }};
  const auto res = train_stage1(model, clean_of(train), clean_of(val), hooks);
  write_json(dir / "stage1_history.json", {{"losses", res.losses}, {"val_recon_mse_neg", res.val}});
  std::cout << "stage-1 checkpoint: " << ck_path.string() << " (step " << res.best.step
            << ", val recon MSE " << -res.best.val_metric << ", latent scale " << model.latent_scale() << ")\n";
  return 0;
}

template <typename T>
int train_diffusion(const Globals& g, const RunConfig& cfg, const Checkpoint& stage1) {
  const auto dir = out_dir(g);
  const auto train = load_pairs(cfg.train_manifest);
  const auto val = load_optional(cfg.validation_manifest);
  auto model = LatentDiffusionModel<T>::from_checkpoint(cfg, stage1);
  const fs::path ck_path = dir / "stage2.ildc";
  TrainHooks hooks{[&](const std::string& s) { log_line(g, s); },
                   [&](const Checkpoint& ck) { save_checkpoint(ck, ck_path); }};
  const auto res = train_stage2(*model, train, val, hooks);
  write_json(dir / "stage2_history.json", {{"losses", res.losses}, {"val_ssim_k5", res.val}});
  std::cout << "stage-2 checkpoint: " << ck_path.string() << " (step " << res.best.step << ", val SSIM(K=5) "
            << res.best.val_metric << ")\n";
  return 0;
}

template <typename T>
int denoise(const Globals& g, const RunConfig& cfg, const Checkpoint& ck, const InputSet& in, int K, bool eval) {
  auto model = LatentDiffusionModel<T>::from_checkpoint(cfg, ck);
  if (model->stage() < 2) throw StateError("denoise needs a stage-2 checkpoint");
  const auto dir = out_dir(g);
  std::vector<UltrasoundImage> outputs;
  for (std::size_t i = 0; i < in.images.size(); ++i) {
    outputs.push_back(model->denoise(in.images[i], K, mix_seed(cfg.seed, i)));
    io::save_any(outputs.back(), suffixed(dir, in.paths[i], "denoised"));
  }
  std::cout << "wrote " << outputs.size() << " denoised image(s) to " << dir.string() << "\n";
  if (eval) {
    const auto rep = metrics::evaluate_pairs(outputs, in.references, {1000, 0.95, cfg.seed});
    auto j = metrics::to_json(rep);
    j["K"] = K;
    write_json(dir / "metrics.json", j);
    std::printf("SSIM %.4f +- %.4f  PSNR %.3f +- %.3f dB  (n=%zu, K=%d)\n", rep.ssim_mean, rep.ssim_std, rep.psnr_mean,
                rep.psnr_std, rep.n_pairs, K);
  }
  return 0;
}

template <typename T>
int bench(const Globals& g, const RunConfig& cfg, const Checkpoint& ck, const std::vector<int>& ks, int reps,
          int warmup, const std::string& manifest) {
  auto model = LatentDiffusionModel<T>::from_checkpoint(cfg, ck);
  std::vector<UltrasoundImage> frames;
  if (!manifest.empty())
    for (const auto& p : load_pairs(manifest)) frames.push_back(p.contaminated);
  else
    frames.push_back(apply_hifu_interference(synth_clean_phantom(cfg.seed, cfg.image_size, cfg.image_size, 2), {}));
  const auto rep = bench_timing(*model, frames, ks, reps, warmup, cfg.seed);
  write_json(out_dir(g) / "timing.json", to_json(rep));
  for (const auto& k : rep.per_k)
    std::printf("K=%-3d sampler %8.2f +- %6.2f ms  total %8.2f ms  %6.2f fps\n", k.K, k.sampler_mean_ms, k.sampler_std_ms,
                k.total_ms, k.fps);
  std::printf("encode %.2f ms, decode %.2f ms; sampler fit %.3f ms/step + %.3f ms, R^2 %.4f\n", rep.encode_ms,
              rep.decode_ms, rep.fit.slope, rep.fit.intercept, rep.fit.r2);
  return 0;
}

template <typename T>
int ablate(const Globals& g, const RunConfig& cfg, const std::vector<AblationVariant>& variants, int K) {
  AblationData data{load_pairs(cfg.train_manifest), load_optional(cfg.validation_manifest), load_pairs(cfg.test_manifest)};
  const auto rows = run_ablation<T>(variants, data, K, {[&](const std::string& s) { log_line(g, s); }, nullptr});
  write_json(out_dir(g) / "ablation.json", to_json(rows));
  std::cout << ablation_table(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ildiff: latent diffusion suppression of HIFU interference in ultrasound B-mode images"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run configuration (JSON)");
  app.add_option("--seed", g.seed, "override the configured seed");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--quiet", g.quiet, "suppress progress logging");

  auto* gen = app.add_subcommand("gen-data", "simulate duty-cycled sessions, pair and split them");

  auto* tv = app.add_subcommand("train-vqvae", "stage 1: train the clean encoder, codebook and decoder");

  std::string stage1_path;
  auto* td = app.add_subcommand("train-diffusion", "stage 2: train the condition encoder and noise predictor");
  td->add_option("--stage1", stage1_path, "stage-1 checkpoint")->required();

  std::string ckpt_path, manifest;
  std::vector<std::string> inputs, refs;
  int K = 5;
  bool eval = false;
  auto* dn = app.add_subcommand("denoise", "denoise contaminated images with a trained model");
  dn->add_option("inputs", inputs, "contaminated images");
  dn->add_option("--checkpoint", ckpt_path, "stage-2 checkpoint")->required();
  dn->add_option("--manifest", manifest, "pair manifest (inputs and references)");
  dn->add_option("--reference", refs, "clean reference per input, in order");
  dn->add_option("--k", K, "DDIM sampling steps");
  dn->add_flag("--eval", eval, "score outputs against the references");

  double f0 = -1.0, q = 10.0;
  std::vector<double> q_grid;
  auto* nb = app.add_subcommand("baseline-notch", "axial notch-filter baseline");
  nb->add_option("inputs", inputs, "contaminated images");
  nb->add_option("--manifest", manifest, "pair manifest (inputs and references)");
  nb->add_option("--reference", refs, "clean reference per input, in order");
  nb->add_option("--f0", f0, "notch frequency in cycles/pixel (default: the configured fringe frequency)");
  nb->add_option("--q", q, "quality factor");
  nb->add_option("--tune-q", q_grid, "comma-separated Q values; picks the best against the references (oracle tuning)")
      ->delimiter(',')
      ->allow_extra_args(false);
  nb->add_flag("--eval", eval, "score outputs against the references");

  std::vector<std::string> preds;
  std::string pred_dir, pred_tag = "denoised";
  auto* ev = app.add_subcommand("evaluate", "SSIM/PSNR with bootstrap confidence intervals");
  ev->add_option("--pred", preds, "output images");
  ev->add_option("--reference", refs, "clean reference per output, in order");
  ev->add_option("--manifest", manifest, "pair manifest; outputs are looked up in --pred-dir");
  ev->add_option("--pred-dir", pred_dir, "directory holding <stem>.<tag><ext> outputs");
  ev->add_option("--tag", pred_tag, "output name tag (denoised, notch, or 'none' for the raw inputs)");

  int window = 15, bins = 64;
  std::string weighting = "intensity";
  auto* en = app.add_subcommand("entropy", "weighted ultrasound entropy maps");
  en->add_option("inputs", inputs, "images")->required();
  en->add_option("--window", window, "odd window size");
  en->add_option("--bins", bins, "histogram bins");
  en->add_option("--weighting", weighting, "uniform or intensity");

  std::vector<int> ks{5, 10, 20, 30};
  int reps = 10, warmup = 2;
  auto* bn = app.add_subcommand("bench", "sampler timing against K");
  bn->add_option("--checkpoint", ckpt_path, "stage-2 checkpoint")->required();
  bn->add_option("--k", ks, "K values");
  bn->add_option("--reps", reps, "measured repetitions per K");
  bn->add_option("--warmup", warmup, "unmeasured warm-up rounds");
  bn->add_option("--manifest", manifest, "frames to time (default: one synthetic frame)");

  std::vector<int> t_grid;
  std::string only;
  auto* ab = app.add_subcommand("ablate", "diffusion-step and attention ablations");
  ab->add_option("--t-grid", t_grid, "override the T values (default 500 1000 2000)");
  ab->add_option("--only", only, "steps or attention")->check(CLI::IsMember({"steps", "attention"}));
  ab->add_option("--k", K, "DDIM steps used for scoring");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto run_typed = [&](const RunConfig& cfg, auto&& fn) {
      return cfg.precision == "double" ? fn(double{}) : fn(float{});
    };

    if (gen->parsed()) {
      const RunConfig cfg = resolve_config(g);
      const auto data = synthesize_dataset(cfg);
      const auto summary = write_dataset(data, out_dir(g), cfg.dataset.format);
      std::cout << summary.dump() << "\n";
      return 0;
    }
    if (tv->parsed()) {
      const RunConfig cfg = resolve_config(g);
      return run_typed(cfg, [&](auto tag) { return train_vqvae<decltype(tag)>(g, cfg); });
    }
    if (td->parsed()) {
      const Checkpoint ck = load_checkpoint(stage1_path);
      const RunConfig cfg = resolve_config(g, &ck);
      return run_typed(cfg, [&](auto tag) { return train_diffusion<decltype(tag)>(g, cfg, ck); });
    }
    if (dn->parsed()) {
      if (K < 1) throw UsageError("--k must be >= 1");
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const RunConfig cfg = resolve_config(g, &ck);
      if (K > cfg.schedule.T) throw UsageError("--k must not exceed T = " + std::to_string(cfg.schedule.T));
      const InputSet in = gather_inputs(inputs, manifest, refs);
      if (eval && in.references.empty()) throw UsageError("--eval needs clean references (--reference or --manifest)");
      return run_typed(cfg, [&](auto tag) { return denoise<decltype(tag)>(g, cfg, ck, in, K, eval); });
    }
    if (nb->parsed()) {
      const RunConfig cfg = resolve_config(g);
      const InputSet in = gather_inputs(inputs, manifest, refs);
      if ((eval || !q_grid.empty()) && in.references.empty())
        throw UsageError("--eval/--tune-q need clean references (--reference or --manifest)");
      notch::NotchConfig nc{f0 > 0.0 ? f0 : cfg.dataset.fringe_frequency, q, true};
      if (!q_grid.empty()) {
        double best = -1e300;
        for (double qq : q_grid) {
          notch::NotchConfig c = nc;
          c.quality_factor = qq;
          double s = 0.0;
          for (std::size_t i = 0; i < in.images.size(); ++i) s += metrics::ssim(notch::apply_notch(in.images[i], c), in.references[i]);
          if (s > best) best = s, nc.quality_factor = qq;
        }
        std::printf("tuned Q = %g\n", nc.quality_factor);
      }
      const auto dir = out_dir(g);
      std::vector<UltrasoundImage> outputs;
      for (std::size_t i = 0; i < in.images.size(); ++i) {
        outputs.push_back(notch::apply_notch(in.images[i], nc));
        io::save_any(outputs.back(), suffixed(dir, in.paths[i], "notch"));
      }
      if (eval) {
        const auto rep = metrics::evaluate_pairs(outputs, in.references, {1000, 0.95, cfg.seed});
        auto j = metrics::to_json(rep);
        j["f0"] = nc.center_freq;
        j["Q"] = nc.quality_factor;
        write_json(dir / "metrics_notch.json", j);
        std::printf("notch f0=%.4f Q=%g: SSIM %.4f +- %.4f  PSNR %.3f dB (n=%zu)\n", nc.center_freq, nc.quality_factor,
                    rep.ssim_mean, rep.ssim_std, rep.psnr_mean, rep.n_pairs);
      }
      return 0;
    }
    if (ev->parsed()) {
      const RunConfig cfg = resolve_config(g);
      std::vector<UltrasoundImage> outs, references;
      if (!manifest.empty()) {
        const auto base = fs::path(manifest).parent_path();
        for (const auto& r : read_manifest(manifest)) {
          const fs::path pc = fs::path(r.path_contaminated).is_absolute() ? fs::path(r.path_contaminated) : base / r.path_contaminated;
          const fs::path pr = fs::path(r.path_clean).is_absolute() ? fs::path(r.path_clean) : base / r.path_clean;
          if (pred_tag == "none")
            outs.push_back(io::load_image(pc));
          else {
            if (pred_dir.empty()) throw UsageError("--manifest needs --pred-dir (or --tag none)");
            outs.push_back(io::load_image(suffixed(pred_dir, pc, pred_tag)));
          }
          references.push_back(io::load_image(pr));
        }
      } else {
        if (preds.empty() || preds.size() != refs.size()) throw UsageError("evaluate needs matching --pred and --reference lists");
        for (const auto& p : preds) outs.push_back(io::load_image(p));
        for (const auto& r : refs) references.push_back(io::load_image(r));
      }
      const auto rep = metrics::evaluate_pairs(outs, references, {1000, 0.95, cfg.seed});
      write_json(out_dir(g) / "evaluation.json", metrics::to_json(rep));
      std::printf("SSIM %.4f +- %.4f [%.4f, %.4f]  PSNR %.3f +- %.3f [%.3f, %.3f] dB (n=%zu)\n", rep.ssim_mean, rep.ssim_std,
                  rep.ssim_ci_low, rep.ssim_ci_high, rep.psnr_mean, rep.psnr_std, rep.psnr_ci_low, rep.psnr_ci_high,
                  rep.n_pairs);
      return 0;
    }
    if (en->parsed()) {
      const entropy::WueConfig wc{window, bins, entropy::parse_weighting(weighting)};
      wc.validate();
      const auto dir = out_dir(g);
      for (const auto& f : inputs) {
        const auto map = entropy::wue_map(io::load_image(f), wc);
        io::save_raw(map, dir / (fs::path(f).stem().string() + ".wue.ild"));
        io::save_grid_preview(map, dir / (fs::path(f).stem().string() + ".wue.pgm"));
      }
      std::cout << "wrote " << inputs.size() << " entropy map(s) to " << dir.string() << "\n";
      return 0;
    }
    if (bn->parsed()) {
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const RunConfig cfg = resolve_config(g, &ck);
      return run_typed(cfg, [&](auto tag) { return bench<decltype(tag)>(g, cfg, ck, ks, reps, warmup, manifest); });
    }
    if (ab->parsed()) {
      const RunConfig cfg = resolve_config(g);
      const bool custom = !t_grid.empty();
      const auto variants = ablation_grid(cfg, custom ? t_grid : kAblationTGrid, custom, only != "attention", only != "steps");
      return run_typed(cfg, [&](auto tag) { return ablate<decltype(tag)>(g, cfg, variants, K); });
    }
  } catch (const ildiff::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
