// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Criteria 6, 7 and 9 share one desk-scale training run (configs/desk.json).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grad_check.hpp"
#include "ildiff/core/nn.hpp"
#include "ildiff/diffusion.hpp"
#include "ildiff/entropy.hpp"
#include "ildiff/metrics.hpp"
#include "ildiff/notch.hpp"
#include "ildiff/pipeline/bench.hpp"
#include "ildiff/pipeline/datagen.hpp"
#include "ildiff/pipeline/training.hpp"

#ifndef ILDIFF_SOURCE_DIR
#define ILDIFF_SOURCE_DIR "."
#endif

using namespace ildiff;
using namespace ildiff::pipeline;
namespace fs = std::filesystem;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

// ---- 1. schedule ------------------------------------------------------------

Outcome schedule_oracle() {
  Outcome o;
  const auto t0 = clock_type::now();
  const auto s = diffusion::build_schedule(1000, 0.0015, 0.0155);
  // Independent product loop over the closed-form betas.
  double prod = 1.0;
  double max_rec = 0.0;
  bool decreasing = true;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - (0.0015 + (t - 1) * (0.0155 - 0.0015) / 999.0);
    max_rec = std::max(max_rec, std::abs(s.alpha_bars[t] - s.alpha_bars[t - 1] * s.alphas[t]));
    decreasing = decreasing && s.alpha_bars[t] < s.alpha_bars[t - 1];
  }
  const double secs = seconds_since(t0);
  o.check(s.alpha_bars[1000] < 1e-3, fmt("alpha_bar_1000 = %.3e < 1e-3", s.alpha_bars[1000]));
  o.check(std::abs(prod - s.alpha_bars[1000]) <= 1e-12, fmt("independent product %.6e matches", prod));
  o.check(decreasing, "alpha_bar strictly decreasing");
  o.check(max_rec <= 1e-12, fmt("recurrence max error %.2e <= 1e-12", max_rec));
  o.check(secs < 1.0, fmt("runtime %.4f s < 1 s", secs));
  return o;
}

// ---- 2. metrics -------------------------------------------------------------

Outcome metric_closed_forms() {
  Outcome o;
  Rng rng(21);
  std::vector<double> px(64 * 64);
  for (auto& v : px) v = rng.uniform();
  const UltrasoundImage x(64, 64, px);
  const double self = metrics::ssim(x, x);
  o.check(std::abs(self - 1.0) <= 1e-12, fmt("SSIM(x, x) = %.15f", self));
  const double s01 = metrics::ssim(UltrasoundImage::filled(64, 64, 0.0), UltrasoundImage::filled(64, 64, 1.0));
  o.check(std::abs(s01 - 9.999e-5) <= 1e-7, fmt("SSIM(0, 1) = %.6e (target 9.999e-5 +- 1e-7)", s01));
  const double p = metrics::psnr(UltrasoundImage::filled(64, 64, 0.0), UltrasoundImage::filled(64, 64, 0.5));
  o.check(std::abs(p - 6.0206) <= 1e-3, fmt("PSNR at MSE 0.25 = %.5f dB", p));
  return o;
}

// ---- 3. DDIM inversion ------------------------------------------------------

Outcome ddim_inversion() {
  Outcome o;
  const auto s = diffusion::build_schedule();
  Rng rng(33);
  const auto z0 = Tensor<double>::randn({2, 3, 16, 16}, rng);
  const auto eps = Tensor<double>::randn({2, 3, 16, 16}, rng);
  double worst = 0.0;
  for (int t : {1, 10, 250, 500, 999, 1000}) {
    const auto zt = diffusion::q_sample(z0, t, eps, s);
    const auto back = diffusion::ddim_step(zt, t, 0, eps, 0.0, s);
    for (std::size_t i = 0; i < back.size(); ++i) worst = std::max(worst, std::abs(back[i] - z0[i]));
  }
  o.check(worst <= 1e-6, fmt("max |z0_hat - z0| over t in {1..1000} = %.3e <= 1e-6", worst));
  return o;
}

// ---- 4. gradient checks -----------------------------------------------------

Var<double> param(const Shape& s, Rng& rng) { return Var<double>(Tensor<double>::randn(s, rng), true); }

// Weighted sum so every output element carries a distinct gradient.
Var<double> probe(const Var<double>& y) {
  Rng rng(99);
  Var<double> w(Tensor<double>::randn(y.shape(), rng));
  return ops::sum(ops::mul(y, w));
}

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = clock_type::now();
  {
    Rng rng(41);
    nn::ParameterSet<double> ps;
    nn::AttentionBlock<double> block(ps, "attn", 8, 4, rng);
    auto x = param({1, 8, 3, 3}, rng);
    std::vector<Var<double>> in{x};
    for (auto& e : ps.entries()) {
      e.var.mutable_value() = Tensor<double>::randn(e.var.shape(), rng, 0.5);
      in.push_back(e.var);
    }
    const auto r = checks::grad_check([&] { return probe(block(x)); }, in, 1e-5, 16);
    o.check(r.rel_error <= 1e-4, fmt("attention block relative error %.2e over %.0f entries", r.rel_error,
                                     static_cast<double>(r.checked)));
  }
  {
    Rng rng(42);
    nn::ParameterSet<double> ps;
    nn::ResBlock<double> block(ps, "rb", 4, 6, 8, 0.0, rng);
    auto x = param({2, 4, 4, 4}, rng), temb = param({2, 8}, rng);
    std::vector<Var<double>> in{x, temb};
    for (auto& e : ps.entries()) {
      e.var.mutable_value() = Tensor<double>::randn(e.var.shape(), rng, 0.5);
      in.push_back(e.var);
    }
    const auto r = checks::grad_check([&] { return probe(block(x, &temb, {})); }, in, 1e-5, 16);
    o.check(r.rel_error <= 1e-4, fmt("residual block relative error %.2e over %.0f entries", r.rel_error,
                                     static_cast<double>(r.checked)));
  }
  const double secs = seconds_since(t0);
  o.check(secs < 30.0, fmt("runtime %.2f s < 30 s", secs));
  return o;
}

// ---- 5. notch ---------------------------------------------------------------

// Energy of the best-fitting sinusoid at f in rows [r0, r1), summed over columns.
double stripe_energy(const RealGrid& g, double f, int r0, int r1) {
  double e = 0.0;
  const double w = 2 * std::numbers::pi * f;
  for (int c = 0; c < g.width; ++c) {
    double ss = 0, cc = 0, sc = 0, ys = 0, yc = 0;
    for (int r = r0; r < r1; ++r) {
      const double s = std::sin(w * r), k = std::cos(w * r);
      ss += s * s, cc += k * k, sc += s * k, ys += g(r, c) * s, yc += g(r, c) * k;
    }
    const double det = ss * cc - sc * sc;
    const double a = (ys * cc - yc * sc) / det, b = (yc * ss - ys * sc) / det;
    e += (a * a + b * b) / 2 * (r1 - r0);
  }
  return e;
}

Outcome notch_filter() {
  Outcome o;
  const notch::NotchConfig cfg{0.125, 10.0, true};
  const auto f = notch::design_notch(cfg);
  const double db = 20.0 * std::log10(std::max(std::abs(f.response(cfg.center_freq)), 1e-300));
  o.check(db <= -60.0, fmt("|H(f0)| = %.1f dB <= -60 dB", db));
  const double g0 = std::abs(f.response(0.0)), gn = std::abs(f.response(0.5));
  o.check(std::abs(g0 - 1.0) <= 1e-6 && std::abs(gn - 1.0) <= 1e-6,
          fmt("|H(0)| - 1 = %.1e, |H(Nyquist)| - 1 = %.1e", g0 - 1.0, gn - 1.0));
  const int H = 512, W = 8;
  RealGrid stripe(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) stripe(r, c) = 0.2 * std::sin(2 * std::numbers::pi * cfg.center_freq * r + 0.3 * c);
  const auto out = notch::apply_notch_unclipped(stripe, cfg);
  const int margin = 3 * f.settling_length();
  const double ratio = stripe_energy(out, cfg.center_freq, margin, H - margin) /
                       stripe_energy(stripe, cfg.center_freq, margin, H - margin);
  o.check(ratio <= 0.01, fmt("stripe residual energy %.2e <= 1%% (rows %.0f.., away from the edges)", ratio, margin));
  return o;
}

// ---- 8. protocol ------------------------------------------------------------

Outcome protocol(const RunConfig& desk, const GeneratedData& data) {
  Outcome o;
  RunConfig c = desk;
  c.dataset.cycles = 25;
  const SessionSpec spec = session_spec(c, 0);
  const auto res = make_pairs(simulate_session(spec), spec.info);
  o.check(res.pairs.size() == 50, fmt("25-cycle session -> %.0f pairs (expected 50)", static_cast<double>(res.pairs.size())));

  std::set<std::string> tr, va, te;
  for (const auto& p : data.split.train) tr.insert(p.group_id);
  for (const auto& p : data.split.validation) va.insert(p.group_id);
  for (const auto& p : data.split.test) te.insert(p.group_id);
  bool disjoint = true;
  for (const auto& g : tr) disjoint = disjoint && !va.count(g) && !te.count(g);
  for (const auto& g : va) disjoint = disjoint && !te.count(g);
  o.check(disjoint, "train/validation/test share no session group");
  const double n = static_cast<double>(data.total_pairs());
  const double ptr = 100.0 * data.split.train.size() / n, pva = 100.0 * data.split.validation.size() / n,
               pte = 100.0 * data.split.test.size() / n;
  o.check(std::abs(ptr - 60) <= 5 && std::abs(pva - 20) <= 5 && std::abs(pte - 20) <= 5,
          fmt("split %.1f / ", ptr) + fmt("%.1f / %.1f %% (60/20/20 +- 5)", pva, pte));
  return o;
}

// ---- 10. WUE ----------------------------------------------------------------

Outcome wue_sanity() {
  Outcome o;
  for (auto w : {entropy::Weighting::uniform, entropy::Weighting::intensity}) {
    const auto m = entropy::wue_map(UltrasoundImage::filled(32, 32, 0.6), {7, 16, w});
    double mx = 0;
    for (double v : m.values) mx = std::max(mx, std::abs(v));
    o.check(mx == 0.0, fmt("constant image -> zero map (max %.1e)", mx));
  }
  // 3x3 windows over a period-3 tiling hold each of 9 bins exactly once.
  const int bins = 9;
  const int n = 36;
  std::vector<double> px(n * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) px[r * n + c] = ((r % 3) * 3 + c % 3 + 0.5) / bins;
  const auto m = entropy::wue_map(UltrasoundImage(n, n, px), {3, bins, entropy::Weighting::uniform});
  double worst = 0;
  for (int r = 1; r < n - 1; ++r)
    for (int c = 1; c < n - 1; ++c) worst = std::max(worst, std::abs(m(r, c) - std::log2(bins)));
  o.check(worst <= 1e-12, fmt("uniform-occupancy windows -> log2(bins) (max error %.1e)", worst));

  Rng rng(10);
  std::vector<double> noise(48 * 40);
  for (auto& v : noise) v = rng.uniform();
  bool bounded = true;
  for (auto w : {entropy::Weighting::uniform, entropy::Weighting::intensity})
    for (int b : {2, 16, 64}) {
      const auto mm = entropy::wue_map(UltrasoundImage(48, 40, noise), {9, b, w});
      for (double v : mm.values) bounded = bounded && v >= 0.0 && v <= std::log2(b) + 1e-12;
    }
  o.check(bounded, "random images: map within [0, log2(bins)] for every weighting and bin count");
  return o;
}

// ---- 6, 7, 9. desk-scale run ------------------------------------------------

struct DeskOutcomes {
  Outcome end_to_end, timing, freeze;
};

std::map<std::string, Tensor<float>> stage1_values(const LatentDiffusionModel<float>& m) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& e : m.params().entries())
    if (e.name.rfind("xi.", 0) == 0 || e.name.rfind("decoder.", 0) == 0) out.emplace(e.name, e.var.value());
  return out;
}

double mean_ssim(const std::vector<UltrasoundImage>& a, const std::vector<UltrasoundImage>& ref) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += metrics::ssim(a[i], ref[i]);
  return s / static_cast<double>(a.size());
}

DeskOutcomes desk_run(const RunConfig& cfg, const GeneratedData& data, const fs::path& workdir,
                      nlohmann::ordered_json& report) {
  DeskOutcomes out;
  auto log = [](const std::string& s) {
    std::printf("    %s\n", s.c_str());
    std::fflush(stdout);
  };
  std::vector<UltrasoundImage> train_clean, val_clean, test_in, test_ref;
  for (const auto& p : data.split.train) train_clean.push_back(p.clean);
  for (const auto& p : data.split.validation) val_clean.push_back(p.clean);
  for (const auto& p : data.split.test) test_in.push_back(p.contaminated), test_ref.push_back(p.clean);

  LatentDiffusionModel<float> model(cfg);
  auto t0 = clock_type::now();
  train_stage1(model, train_clean, val_clean, {log, nullptr});
  const double s1_secs = seconds_since(t0);
  save_checkpoint(model.to_checkpoint(), workdir / "stage1.ildc");
  const auto before = stage1_values(model);

  t0 = clock_type::now();
  train_stage2(model, data.split.train, data.split.validation, {log, nullptr});
  const double s2_secs = seconds_since(t0);
  save_checkpoint(model.to_checkpoint(), workdir / "stage2.ildc");

  // 9. freeze contract
  const auto after = stage1_values(model);
  std::size_t changed = 0;
  for (const auto& [name, v] : before)
    if (!(after.at(name) == v)) ++changed;
  out.freeze.check(!before.empty() && changed == 0,
                   fmt("%.0f xi/decoder tensors, %.0f changed by stage 2", static_cast<double>(before.size()),
                       static_cast<double>(changed)));

  // 6. end to end
  t0 = clock_type::now();
  const double s_cont = mean_ssim(test_in, test_ref);
  const double s_rec = mean_ssim(model.reconstruct(test_ref), test_ref);
  const auto out5 = model.denoise_all(test_in, 5, cfg.seed);
  const auto out30 = model.denoise_all(test_in, 30, cfg.seed);
  const double s5 = mean_ssim(out5, test_ref), s30 = mean_ssim(out30, test_ref);
  // Oracle notch: centred on the true fringe frequency, Q picked on the test references.
  double s_notch = -1, best_q = 0;
  for (double q : {0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0, 20.0}) {
    std::vector<UltrasoundImage> filtered;
    for (const auto& im : test_in) filtered.push_back(notch::apply_notch(im, {cfg.dataset.fringe_frequency, q, true}));
    const double s = mean_ssim(filtered, test_ref);
    if (s > s_notch) s_notch = s, best_q = q;
  }
  const double eval_secs = seconds_since(t0);
  auto& e = out.end_to_end;
  e.notes.push_back(fmt("pairs: %.0f, test pairs %.0f", static_cast<double>(data.total_pairs()),
                        static_cast<double>(test_in.size())));
  e.notes.push_back(fmt("training: stage 1 %.0f s, stage 2 %.0f s", s1_secs, s2_secs) +
                    fmt(", evaluation %.0f s", eval_secs));
  e.notes.push_back(fmt("VQ-VAE reconstruction SSIM of clean test images %.4f (upper reference)", s_rec));
  e.notes.push_back(fmt("oracle notch: f0 = %.4f, best Q = %.1f", cfg.dataset.fringe_frequency, best_q));
  e.check(s30 >= s_cont + 0.05, fmt("(a) SSIM denoised K=30 %.4f >= contaminated %.4f + 0.05", s30, s_cont));
  e.notes.push_back(fmt("     SSIM denoised K=5  %.4f (contaminated + %.4f)", s5, s5 - s_cont));
  e.check(s30 >= s_notch, fmt("(b) SSIM denoised K=30 %.4f >= oracle notch %.4f", s30, s_notch));
  e.check(s30 >= s5 - 0.01, fmt("(c) SSIM K=30 %.4f >= SSIM K=5 %.4f - 0.01", s30, s5));
  e.check(s1_secs + s2_secs <= 8 * 3600.0, fmt("training time %.0f s within the 8 h CPU budget", s1_secs + s2_secs));
  report["end_to_end"] = {{"contaminated_ssim", s_cont}, {"reconstruction_ssim", s_rec}, {"ssim_k5", s5},
                          {"ssim_k30", s30},          {"oracle_notch_ssim", s_notch}, {"oracle_notch_q", best_q},
                          {"stage1_seconds", s1_secs}, {"stage2_seconds", s2_secs}};

  // 7. timing
  std::vector<UltrasoundImage> frames(test_in.begin(), test_in.begin() + std::min<std::size_t>(8, test_in.size()));
  const auto rep = bench_timing(model, frames, {5, 10, 20, 30}, 12, 2, cfg.seed);
  const double ratio = sampler_ratio(rep, 30, 5);
  auto& t = out.timing;
  for (const auto& k : rep.per_k)
    t.notes.push_back(fmt("K=%2.0f sampler %.2f ms", k.K, k.sampler_mean_ms) + fmt(" (sd %.2f), %.1f fps", k.sampler_std_ms, k.fps));
  t.check(rep.fit.r2 >= 0.95, fmt("linear fit R^2 %.5f >= 0.95 (slope %.3f ms/step)", rep.fit.r2, rep.fit.slope));
  t.check(ratio >= 4.0 && ratio <= 8.0, fmt("time(K=30)/time(K=5) = %.3f in [4, 8]", ratio));
  report["timing"] = to_json(rep);
  return out;
}

void emit(int id, const std::string& name, const Outcome& o, nlohmann::ordered_json& report, int& failures) {
  std::printf("%s %d %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str());
  for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
  std::fflush(stdout);
  report["criteria"][std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"notes", o.notes}};
  if (!o.pass) ++failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string workdir = "acceptance_run";
  std::string config = std::string(ILDIFF_SOURCE_DIR) + "/configs/desk.json";
  bool skip_desk = false;
  app.add_option("--workdir", workdir, "scratch directory for data, checkpoints and the report");
  app.add_option("--config", config, "desk-scale run configuration");
  app.add_flag("--skip-desk", skip_desk, "skip the training run (criteria 6, 7, 9 report FAIL)");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(workdir);
    nlohmann::ordered_json report;
    int failures = 0;
    emit(1, "noise schedule oracle", schedule_oracle(), report, failures);
    emit(2, "closed-form SSIM/PSNR", metric_closed_forms(), report, failures);
    emit(3, "DDIM single-jump inversion", ddim_inversion(), report, failures);
    emit(4, "attention/residual block gradient checks", gradient_checks(), report, failures);
    emit(5, "notch filter response and stripe removal", notch_filter(), report, failures);

    const RunConfig cfg = load_config(config);
    std::printf("     (generating %d sessions x %d cycles, %dx%d)\n", cfg.dataset.sessions, cfg.dataset.cycles,
                cfg.image_size, cfg.image_size);
    const GeneratedData data = synthesize_dataset(cfg);
    const Outcome proto = protocol(cfg, data);

    DeskOutcomes desk;
    if (skip_desk) {
      for (Outcome* o : {&desk.end_to_end, &desk.timing, &desk.freeze}) o->check(false, "skipped (--skip-desk)");
    } else {
      std::printf("     (desk-scale training, config %s)\n", config.c_str());
      desk = desk_run(cfg, data, workdir, report);
    }
    emit(6, "desk-scale end to end", desk.end_to_end, report, failures);
    emit(7, "sampler timing scales linearly in K", desk.timing, report, failures);
    emit(8, "pairing and group-disjoint split", proto, report, failures);
    emit(9, "stage-1 tensors frozen through stage 2", desk.freeze, report, failures);
    emit(10, "WUE sanity", wue_sanity(), report, failures);

    io::detail::write_file(fs::path(workdir) / "acceptance.json", report.dump(2) + "\n");
    std::printf("%d of 10 criteria passed\n", 10 - failures);
    return failures == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance run aborted: %s\n", e.what());
    return 1;
  }
}
