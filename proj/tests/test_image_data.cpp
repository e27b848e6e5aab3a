#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "ildiff/dataset.hpp"
#include "ildiff/metrics.hpp"

using namespace ildiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ildiff_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string pgm_bytes(int w, int h, unsigned char fill) {
  std::string s = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  s.append(static_cast<std::size_t>(w) * h, static_cast<char>(fill));
  return s;
}

std::vector<Frame> session_of(int cycles, int on, int off) {
  const auto img = UltrasoundImage::filled(16, 16, 0.5);
  std::vector<Frame> f;
  for (int c = 0; c < cycles; ++c) {
    for (int i = 0; i < on; ++i) f.push_back({img, true});
    for (int i = 0; i < off; ++i) f.push_back({img, false});
  }
  return f;
}

std::vector<ImagePair> grouped_pairs(int groups, int per_group) {
  std::vector<ImagePair> out;
  const auto img = UltrasoundImage::filled(16, 16, 0.2);
  for (int g = 0; g < groups; ++g)
    for (int i = 0; i < per_group; ++i)
      out.push_back({img, img, Modality::DW, 123, TissueClass::phantom, "g" + std::to_string(g)});
  return out;
}

}  // namespace

TEST(ImageData, ImageInvariants) {
  EXPECT_THROW(UltrasoundImage(16, 16, std::vector<double>(256, 1.5)), ParameterError);
  EXPECT_THROW(UltrasoundImage::filled(12, 16, 0.0), ShapeError);
  EXPECT_THROW(UltrasoundImage::filled(18, 16, 0.0), ShapeError);
  EXPECT_NO_THROW(UltrasoundImage::filled(20, 16, 0.0));
}

TEST(ImageData, LoadPgmValues) {
  const auto dir = temp_dir("pgm");
  io::detail::write_file(dir / "zero.pgm", pgm_bytes(32, 32, 0));
  const auto z = io::load_image(dir / "zero.pgm");
  EXPECT_EQ(z.height(), 32);
  for (double v : z.pixels()) EXPECT_EQ(v, 0.0);
  io::detail::write_file(dir / "full.pgm", pgm_bytes(16, 16, 255));
  EXPECT_EQ(io::load_image(dir / "full.pgm")(3, 3), 1.0);
  io::detail::write_file(dir / "mid.pgm", pgm_bytes(16, 16, 128));
  EXPECT_NEAR(io::load_image(dir / "mid.pgm")(0, 0), 0.501961, 1e-6);
}

TEST(ImageData, LoadErrors) {
  const auto dir = temp_dir("pgm_err");
  EXPECT_THROW(io::load_image(dir / "missing.pgm"), IoError);
  io::detail::write_file(dir / "rgb.ppm", "P6\n16 16\n255\n" + std::string(16 * 16 * 3, '\0'));
  EXPECT_THROW(io::load_image(dir / "rgb.ppm"), FormatError);
  io::detail::write_file(dir / "short.pgm", "P5\n16 16\n255\nabc");
  EXPECT_THROW(io::load_image(dir / "short.pgm"), FormatError);
}

TEST(ImageData, SaveRoundTripWithinQuantization) {
  const auto dir = temp_dir("roundtrip");
  const auto img = synth_clean_phantom(3, 32, 48, 2);
  io::save_image(img, dir / "a.pgm");
  const auto back = io::load_image(dir / "a.pgm");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.pixels().size(); ++i)
    EXPECT_LE(std::abs(back.pixels()[i] - img.pixels()[i]), 1.0 / 510 + 1e-12);
  // Raw floats are exact up to float precision.
  io::save_any(img, dir / "a.ild");
  const auto raw = io::load_image(dir / "a.ild");
  for (std::size_t i = 0; i < img.pixels().size(); ++i) EXPECT_NEAR(raw.pixels()[i], img.pixels()[i], 1e-7);
}

TEST(ImageData, ByteRounding) {
  EXPECT_EQ(io::to_byte(0.5), 128);
  EXPECT_EQ(io::to_byte(1.0), 255);
  EXPECT_EQ(io::to_byte(0.0), 0);
}

TEST(ImageData, RawFormatLayout) {
  RealGrid g(2, 3, {0, 1, 2, 3, 4, 5});
  const std::string b = io::encode_raw(g);
  ASSERT_EQ(b.size(), 4u + 8u + 6u * 4u);
  EXPECT_EQ(b.substr(0, 4), "ILD1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 2);  // height, little endian
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 3);  // width
  float f;
  std::memcpy(&f, b.data() + 12 + 4 * 5, 4);
  EXPECT_EQ(f, 5.0f);
  EXPECT_EQ(io::decode_raw(b).values, g.values);
  EXPECT_THROW(io::decode_raw(b.substr(0, 20)), FormatError);
}

TEST(ImageData, PhantomDeterministicAndInRange) {
  const auto a = synth_clean_phantom(11, 64, 64, 2);
  const auto b = synth_clean_phantom(11, 64, 64, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, synth_clean_phantom(12, 64, 64, 2));
  for (double v : a.pixels()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ImageData, AnechoicInclusionsAreDark) {
  Rng rng(21);
  const PhantomOptions opt;
  const auto layout = make_layout(TissueClass::phantom, 128, 128, 2, rng, opt);
  ASSERT_EQ(layout.anechoic.size(), 2u);
  EXPECT_GE(layout.reflectors.size(), 1u);
  const auto field = ScattererField::random(128, 128, psf_radius(opt.speckle) + 2, rng);
  const auto img = render_bmode(layout, field, opt);
  double in = 0, out = 0;
  int nin = 0, nout = 0;
  for (int r = 0; r < 128; ++r)
    for (int c = 0; c < 128; ++c) {
      bool inside = false, near = false;
      for (const auto& d : layout.anechoic) {
        const double dist = std::hypot(r - d.cy, c - d.cx);
        inside |= dist < 0.6 * d.r;
        near |= dist < d.r + 4;
      }
      for (const auto& l : layout.reflectors) {
        const double along = l.horizontal ? c : r, across = l.horizontal ? r : c;
        near |= std::abs(across - l.pos) < 4 && along > l.from - 4 && along < l.to + 4;
      }
      if (inside) in += img(r, c), ++nin;
      else if (!near) out += img(r, c), ++nout;
    }
  ASSERT_GT(nin, 0);
  EXPECT_LT(in / nin, 0.3 * (out / nout));
}

TEST(ImageData, InclusionGeometryMustFit) {
  PhantomOptions opt;
  opt.inclusion_radius = 40;
  EXPECT_THROW(synth_clean_phantom(1, 64, 64, 3, opt), ParameterError);
}

TEST(ImageData, ZeroInterferenceIsIdentity) {
  const auto clean = synth_clean_phantom(4, 32, 32, 1);
  InterferenceConfig cfg;
  cfg.base_amplitude = 0.0;
  cfg.broadband_sigma = 0.0;
  EXPECT_EQ(apply_hifu_interference(clean, cfg), clean);
}

TEST(ImageData, InterferenceMonotoneInPower) {
  const auto clean = synth_clean_phantom(5, 64, 64, 2);
  double prev = 2.0;
  for (int p : kPowerLevels) {
    InterferenceConfig cfg;
    cfg.power_level = p;
    cfg.seed = 77;
    const auto dirty = apply_hifu_interference(clean, cfg);
    for (double v : dirty.pixels()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    const double s = metrics::ssim(dirty, clean);
    EXPECT_LT(s, prev) << p;
    prev = s;
  }
  EXPECT_LT(amplitude_for_power(123, 0.1), amplitude_for_power(167, 0.1));
  EXPECT_THROW(amplitude_for_power(150, 0.1), ConfigError);
}

TEST(ImageData, PairingCounts) {
  SessionInfo info{Modality::WB, 220, TissueClass::ex_vivo, "s1"};
  auto r = make_pairs(session_of(25, 3, 3), info);
  EXPECT_EQ(r.pairs.size(), 50u);
  EXPECT_EQ(r.skipped_cycles, 0);
  EXPECT_EQ(make_pairs(session_of(1, 3, 3), info).pairs.size(), 2u);
  // Off-segment missing on the final cycle.
  auto frames = session_of(1, 3, 0);
  r = make_pairs(frames, info);
  EXPECT_EQ(r.pairs.size(), 0u);
  EXPECT_EQ(r.skipped_cycles, 1);
}

TEST(ImageData, PairingUsesLastTwoOnFrames) {
  std::vector<Frame> f;
  for (int i = 0; i < 3; ++i) f.push_back({UltrasoundImage::filled(16, 16, 0.1 * (i + 1)), true});
  f.push_back({UltrasoundImage::filled(16, 16, 0.9), false});
  f.push_back({UltrasoundImage::filled(16, 16, 0.8), false});
  const auto r = make_pairs(f, {Modality::DW, 123, TissueClass::phantom, "g"});
  ASSERT_EQ(r.pairs.size(), 2u);
  EXPECT_DOUBLE_EQ(r.pairs[0].contaminated(0, 0), 0.2);
  EXPECT_DOUBLE_EQ(r.pairs[1].contaminated(0, 0), 0.3);
  EXPECT_DOUBLE_EQ(r.pairs[0].clean(0, 0), 0.9);
}

TEST(ImageData, SimulatedSessionPairs) {
  SessionSpec spec;
  spec.info = {Modality::LS, 277, TissueClass::in_vivo, "subject-a"};
  spec.height = spec.width = 32;
  spec.seed = 9;
  const auto frames = simulate_session(spec);
  EXPECT_EQ(frames.size(), 150u);
  const auto r = make_pairs(frames, spec.info);
  EXPECT_EQ(r.pairs.size(), 50u);
  EXPECT_EQ(simulate_session(spec)[7].image, frames[7].image);
}

TEST(ImageData, SplitTenEqualGroups) {
  const auto pairs = grouped_pairs(10, 5);
  const auto s = split_dataset(pairs, 3);
  EXPECT_EQ(s.train.size(), 30u);
  EXPECT_EQ(s.validation.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
}

TEST(ImageData, SplitDisjointDeterministicWithinTolerance) {
  std::vector<ImagePair> pairs;
  for (int g = 0; g < 17; ++g) {
    auto more = grouped_pairs(1, 20 + 7 * (g % 5));
    for (auto& p : more) p.group_id = "subject" + std::to_string(g);
    pairs.insert(pairs.end(), more.begin(), more.end());
  }
  const auto a = split_dataset(pairs, 42), b = split_dataset(pairs, 42);
  auto ids = [](const std::vector<ImagePair>& v) {
    std::set<std::string> s;
    for (const auto& p : v) s.insert(p.group_id);
    return s;
  };
  EXPECT_EQ(ids(a.train), ids(b.train));
  EXPECT_EQ(ids(a.test), ids(b.test));
  for (const auto& g : ids(a.train)) {
    EXPECT_FALSE(ids(a.validation).count(g));
    EXPECT_FALSE(ids(a.test).count(g));
  }
  for (const auto& g : ids(a.validation)) EXPECT_FALSE(ids(a.test).count(g));
  const double n = static_cast<double>(pairs.size());
  EXPECT_NEAR(a.train.size() / n, 0.6, 0.05);
  EXPECT_NEAR(a.validation.size() / n, 0.2, 0.05);
  EXPECT_NEAR(a.test.size() / n, 0.2, 0.05);
}

TEST(ImageData, SplitNeedsThreeGroups) { EXPECT_THROW(split_dataset(grouped_pairs(2, 4), 1), SplitError); }

TEST(ImageData, ManifestRoundTrip) {
  const auto dir = temp_dir("manifest");
  const auto img = synth_clean_phantom(2, 16, 16, 0);
  io::save_image(img, dir / "imgs" / "c.pgm");
  io::save_image(img, dir / "imgs" / "k.pgm");
  write_manifest({{"imgs/c.pgm", "imgs/k.pgm", "WB", 167, "ex_vivo", "g7"}}, dir / "m.jsonl");
  const auto pairs = load_pairs(dir / "m.jsonl");
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].modality, Modality::WB);
  EXPECT_EQ(pairs[0].tissue, TissueClass::ex_vivo);
  EXPECT_EQ(pairs[0].group_id, "g7");
  io::detail::write_file(dir / "bad.jsonl", "{\"path_clean\": 1}\n");
  EXPECT_THROW(read_manifest(dir / "bad.jsonl"), FormatError);
}
