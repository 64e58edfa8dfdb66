#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/cohort.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/eval/experiment.hpp"
#include "deepgrade/phantom.hpp"

namespace deepgrade {

/// Single-document configuration for every command. `seed` drives the phantom
/// generator and every training run; `manifest` overrides the generated cohort.
struct RunConfig {
  std::filesystem::path workdir = "work";
  std::filesystem::path manifest;
  std::uint64_t seed = 1;
  int workers = 1;
  phantom::PhantomSpec phantom;
  phantom::ClassCounts counts{{Diagnosis::CN, 30}, {Diagnosis::AD, 30}, {Diagnosis::FTD, 30}};
  std::vector<double> cohort_split{0.6, 0.2, 0.2};
  eval::ExperimentConfig experiment;

  /// Pushes the master seed into the sections that carry their own.
  void apply_seed() {
    phantom.seed = seed;
    experiment.seed = seed;
  }

  void validate() const {
    if (workdir.empty()) throw ValidationError("workdir must be set");
    if (workers < 1) throw ValidationError("workers must be >= 1");
    if (!manifest.empty() && !std::filesystem::exists(manifest))
      throw ValidationError("manifest " + manifest.string() + " does not exist");
    phantom.validate();
    if (counts.empty()) throw ValidationError("phantom counts must name at least one class");
    for (const auto& [d, n] : counts)
      if (n < 1) throw ValidationError("phantom count for " + std::string(to_string(d)) + " must be >= 1");
    if (cohort_split.size() < 2 || cohort_split.size() > 3)
      throw ValidationError("cohort split must list train, val and optionally test fractions");
    experiment.validate();
  }
};

inline nlohmann::json phantom_section(const RunConfig& c) {
  auto j = phantom::to_json(c.phantom);
  j.erase("seed");
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [d, n] : c.counts) counts[std::string(to_string(d))] = n;
  j["counts"] = counts;
  j["split_fractions"] = c.cohort_split;
  return j;
}

inline nlohmann::json to_json(const RunConfig& c) {
  auto exp = eval::to_json(c.experiment);
  exp.erase("seed");
  return {{"workdir", c.workdir.string()},
          {"manifest", c.manifest.string()},
          {"seed", c.seed},
          {"workers", c.workers},
          {"phantom", phantom_section(c)},
          {"experiment", exp}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  RunConfig c;
  try {
    if (j.contains("workdir")) c.workdir = j.at("workdir").get<std::string>();
    if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
    if (!base.empty()) {
      if (c.workdir.is_relative()) c.workdir = base / c.workdir;
      if (!c.manifest.empty() && c.manifest.is_relative()) c.manifest = base / c.manifest;
    }
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      c.phantom = phantom::phantom_spec_from_json(p);
      if (p.contains("counts")) {
        c.counts.clear();
        for (const auto& [k, v] : p.at("counts").items()) c.counts[parse_diagnosis(k)] = v.get<std::size_t>();
      }
      c.cohort_split = p.value("split_fractions", c.cohort_split);
    }
    if (j.contains("experiment")) c.experiment = eval::experiment_config_from_json(j.at("experiment"));
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("bad configuration: ") + ex.what());
  }
  c.apply_seed();
  c.validate();
  return c;
}

/// 64-bit FNV-1a as 16 hex digits.
inline std::string content_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace deepgrade
