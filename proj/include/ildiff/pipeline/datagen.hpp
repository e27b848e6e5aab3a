#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildiff/dataset.hpp"
#include "ildiff/pipeline/config.hpp"

namespace ildiff::pipeline {

// Session i cycles through modalities, power levels and tissue classes so
// every split sees a mix of acquisition settings.
inline SessionSpec session_spec(const RunConfig& cfg, int i) {
  const auto& d = cfg.dataset;
  SessionSpec s;
  s.info.modality = static_cast<Modality>(i % 3);
  s.info.power_level = kPowerLevels[static_cast<std::size_t>(i) % kPowerLevels.size()];
  s.info.tissue = static_cast<TissueClass>((i / 3) % 3);
  char buf[32];
  std::snprintf(buf, sizeof buf, "session_%03d", i);
  s.info.group_id = buf;
  s.height = s.width = cfg.image_size;
  s.cycles = d.cycles;
  s.frames_on = d.frames_on;
  s.frames_off = d.frames_off;
  s.n_inclusions = d.n_inclusions;
  s.scatterer_correlation = d.scatterer_correlation;
  s.interference.base_amplitude = d.base_amplitude;
  s.interference.fringe_frequency = d.fringe_frequency;
  s.interference.broadband_sigma = d.broadband_sigma;
  s.phantom.speckle = {d.psf_sigma_axial, d.psf_sigma_lateral, d.dynamic_range_db};
  s.seed = mix_seed(cfg.seed, 0xD000 + static_cast<std::uint64_t>(i));
  return s;
}

struct GeneratedData {
  DatasetSplit split;
  int skipped_cycles = 0;
  std::size_t total_pairs() const { return split.train.size() + split.validation.size() + split.test.size(); }
};

inline GeneratedData synthesize_dataset(const RunConfig& cfg) {
  if (cfg.dataset.sessions < 3) throw ConfigError("dataset.sessions must be >= 3 for a group-disjoint split");
  std::vector<ImagePair> pairs;
  GeneratedData out;
  for (int i = 0; i < cfg.dataset.sessions; ++i) {
    const SessionSpec spec = session_spec(cfg, i);
    auto res = make_pairs(simulate_session(spec), spec.info);
    out.skipped_cycles += res.skipped_cycles;
    for (auto& p : res.pairs) pairs.push_back(std::move(p));
  }
  out.split = split_dataset(pairs, mix_seed(cfg.seed, 0x5B17));
  return out;
}

// Writes images under dir/images and one manifest per split; returns a
// summary with pair counts per split.
inline nlohmann::ordered_json write_dataset(const GeneratedData& data, const std::filesystem::path& dir,
                                            const std::string& format) {
  const std::string ext = format == "pgm" ? ".pgm" : ".ild";
  std::filesystem::create_directories(dir / "images");
  nlohmann::ordered_json summary;
  auto emit = [&](const std::vector<ImagePair>& pairs, const std::string& name) {
    std::vector<ManifestRecord> recs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs[i];
      const std::string stem = "images/" + name + "_" + std::to_string(i) + "_" + p.group_id;
      io::save_any(p.contaminated, dir / (stem + "_on" + ext));
      io::save_any(p.clean, dir / (stem + "_off" + ext));
      recs.push_back({stem + "_on" + ext, stem + "_off" + ext, to_string(p.modality), p.power_level, to_string(p.tissue),
                      p.group_id});
    }
    write_manifest(recs, dir / (name + ".jsonl"));
    summary[name] = pairs.size();
  };
  emit(data.split.train, "train");
  emit(data.split.validation, "validation");
  emit(data.split.test, "test");
  summary["skipped_cycles"] = data.skipped_cycles;
  io::detail::write_file(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace ildiff::pipeline
