#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildiff/image_io.hpp"
#include "ildiff/interference.hpp"
#include "ildiff/phantom.hpp"

namespace ildiff {

enum class Modality { DW, WB, LS };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::DW: return "DW";
    case Modality::WB: return "WB";
    case Modality::LS: return "LS";
  }
  return "DW";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "DW") return Modality::DW;
  if (s == "WB") return Modality::WB;
  if (s == "LS") return Modality::LS;
  throw FormatError("unknown modality: " + s);
}

struct ImagePair {
  UltrasoundImage contaminated;
  UltrasoundImage clean;
  Modality modality = Modality::DW;
  int power_level = 123;
  TissueClass tissue = TissueClass::phantom;
  std::string group_id;

  void validate() const {
    require_same_shape(contaminated, clean, "ImagePair");
    if (group_id.empty()) throw DataError("ImagePair: empty group_id");
  }
};

struct Frame {
  UltrasoundImage image;
  bool hifu_on = false;
};

// Acquisition metadata shared by every frame of one session.
struct SessionInfo {
  Modality modality = Modality::DW;
  int power_level = 123;
  TissueClass tissue = TissueClass::phantom;
  std::string group_id;
};

struct PairingResult {
  std::vector<ImagePair> pairs;
  int skipped_cycles = 0;
};

// Duty-cycle pairing: within each HIFU-on run, the last two on-frames are each
// paired with the first off-frame that follows. Runs with fewer than two
// on-frames, or with no following off-frame, are skipped and counted.
inline PairingResult make_pairs(const std::vector<Frame>& session, const SessionInfo& info) {
  if (info.group_id.empty()) throw DataError("make_pairs: empty group_id");
  PairingResult res;
  std::size_t i = 0;
  const std::size_t n = session.size();
  while (i < n && !session[i].hifu_on) ++i;
  while (i < n) {
    const std::size_t on_begin = i;
    while (i < n && session[i].hifu_on) ++i;
    const std::size_t on_end = i;  // first off-frame, or n
    const bool has_off = on_end < n;
    if (on_end - on_begin < 2 || !has_off) {
      ++res.skipped_cycles;
    } else {
      const Frame& off = session[on_end];
      for (std::size_t k = on_end - 2; k < on_end; ++k) {
        ImagePair p{session[k].image, off.image, info.modality, info.power_level, info.tissue, info.group_id};
        p.validate();
        res.pairs.push_back(std::move(p));
      }
    }
    while (i < n && !session[i].hifu_on) ++i;
  }
  return res;
}

struct SessionSpec {
  SessionInfo info;
  int height = 64, width = 64;
  int cycles = 25;
  int frames_on = 3;   // 200 ms at 15 frames/s
  int frames_off = 3;
  int n_inclusions = 2;
  double scatterer_correlation = 0.8;  // cycle-to-cycle speckle correlation
  double drift_pixels = 0.6;           // per-cycle probe drift std
  InterferenceConfig interference;     // power_level is taken from info
  PhantomOptions phantom;
  std::uint64_t seed = 0;
};

// Synthetic duty-cycled acquisition: the scene drifts and decorrelates slowly
// from cycle to cycle, a hyperechoic focal lesion grows while HIFU is on, and
// every HIFU-on frame carries fresh interference.
inline std::vector<Frame> simulate_session(const SessionSpec& spec) {
  Rng rng(spec.seed);
  const SceneLayout base = make_layout(spec.info.tissue, spec.height, spec.width, spec.n_inclusions, rng, spec.phantom);
  const int pad = psf_radius(spec.phantom.speckle) + 2;
  ScattererField field = ScattererField::random(spec.height, spec.width, pad, rng);
  const double lesion_y = rng.uniform(0.35, 0.65) * spec.height, lesion_x = rng.uniform(0.35, 0.65) * spec.width;
  const double lesion_max = 0.12 * std::min(spec.height, spec.width);
  InterferenceConfig icfg = spec.interference;
  icfg.power_level = spec.info.power_level;
  std::vector<Frame> frames;
  double dy = 0.0, dx = 0.0;
  for (int c = 0; c < spec.cycles; ++c) {
    dy += spec.drift_pixels * rng.normal();
    dx += spec.drift_pixels * rng.normal();
    SceneLayout layout = base.shifted(dy, dx);
    const double grow = spec.cycles > 1 ? static_cast<double>(c) / (spec.cycles - 1) : 1.0;
    layout.lesion = {lesion_y, lesion_x, lesion_max * grow};
    layout.lesion_gain = 1.0 + 1.5 * grow;
    if (c > 0) field = field.blended(spec.scatterer_correlation, rng);
    const UltrasoundImage clean = render_bmode(layout, field, spec.phantom);
    for (int k = 0; k < spec.frames_on; ++k) {
      icfg.seed = rng.next_u64();
      frames.push_back({apply_hifu_interference(clean, icfg), true});
    }
    for (int k = 0; k < spec.frames_off; ++k) frames.push_back({clean, false});
  }
  return frames;
}

struct DatasetSplit {
  std::vector<ImagePair> train, validation, test;
};

struct SplitRatios {
  double train = 0.6, validation = 0.2, test = 0.2;
};

// Group-disjoint split. Groups are shuffled by seed and greedily assigned to
// the split with the largest relative deficit; a few seeded restarts keep the
// assignment whose pair-count ratios deviate least from the targets.
inline DatasetSplit split_dataset(const std::vector<ImagePair>& pairs, std::uint64_t seed, SplitRatios ratios = {}) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].group_id].push_back(i);
  if (groups.size() < 3)
    throw SplitError("split_dataset needs at least 3 distinct groups, got " + std::to_string(groups.size()));
  std::vector<std::string> names;
  for (const auto& [k, v] : groups) names.push_back(k);
  const std::array<double, 3> target{ratios.train, ratios.validation, ratios.test};
  const double total = static_cast<double>(pairs.size());

  Rng rng(seed);
  std::vector<int> best_assign;
  double best_dev = 1e300;
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<std::string> order = names;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::map<std::string, int> assign;
    std::array<double, 3> count{0, 0, 0};
    for (const auto& g : order) {
      int pick = 0;
      double best = -1e300;
      for (int s = 0; s < 3; ++s) {
        const double deficit = (target[s] * total - count[s]) / (target[s] * total);
        if (deficit > best) best = deficit, pick = s;
      }
      assign[g] = pick;
      count[pick] += static_cast<double>(groups[g].size());
    }
    double dev = 0.0;
    for (int s = 0; s < 3; ++s) dev = std::max(dev, std::abs(count[s] / total - target[s]));
    if (count[1] == 0 || count[2] == 0) dev += 1.0;
    if (dev < best_dev) {
      best_dev = dev;
      best_assign.clear();
      for (const auto& nm : names) best_assign.push_back(assign[nm]);
    }
  }
  DatasetSplit out;
  for (std::size_t gi = 0; gi < names.size(); ++gi) {
    auto& dst = best_assign[gi] == 0 ? out.train : best_assign[gi] == 1 ? out.validation : out.test;
    for (std::size_t idx : groups[names[gi]]) dst.push_back(pairs[idx]);
  }
  return out;
}

// Line-delimited JSON manifest with one record per pair.
struct ManifestRecord {
  std::string path_contaminated;
  std::string path_clean;
  std::string modality;
  int power = 0;
  std::string tissue;
  std::string group;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  return {{"path_contaminated", r.path_contaminated}, {"path_clean", r.path_clean}, {"modality", r.modality},
          {"power", r.power}, {"tissue", r.tissue}, {"group", r.group}};
}

inline void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  io::detail::write_file(path, text);
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("path_contaminated").get<std::string>(), j.at("path_clean").get<std::string>(),
                     j.at("modality").get<std::string>(), j.at("power").get<int>(), j.at("tissue").get<std::string>(),
                     j.at("group").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Loads the images a manifest points at; relative paths resolve against the
// manifest's directory.
inline std::vector<ImagePair> load_pairs(const std::filesystem::path& manifest) {
  const auto base = manifest.parent_path();
  std::vector<ImagePair> pairs;
  for (const auto& r : read_manifest(manifest)) {
    auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    ImagePair p{io::load_image(resolve(r.path_contaminated)), io::load_image(resolve(r.path_clean)),
                parse_modality(r.modality), r.power, parse_tissue(r.tissue), r.group};
    p.validate();
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace ildiff
