#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/error.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade {

enum class Diagnosis { CN = 0, AD = 1, FTD = 2 };
enum class Split { Train = 0, Val = 1, Test = 2 };

inline constexpr std::array<Diagnosis, 3> kAllDiagnoses{Diagnosis::CN, Diagnosis::AD, Diagnosis::FTD};

constexpr std::string_view to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::CN: return "CN";
    case Diagnosis::AD: return "AD";
    case Diagnosis::FTD: return "FTD";
  }
  return "?";
}

constexpr std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Diagnosis parse_diagnosis(std::string_view s) {
  for (auto d : kAllDiagnoses)
    if (to_string(d) == s) return d;
  throw ValidationError("unknown diagnosis '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
  for (auto sp : {Split::Train, Split::Val, Split::Test})
    if (to_string(sp) == s) return sp;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

constexpr bool is_patient(Diagnosis d) { return d != Diagnosis::CN; }

struct ManifestEntry {
  std::string subject_id;
  std::string volume;  // relative to the manifest directory unless absolute
  std::string labels;
  double age = 0.0;
  Diagnosis diagnosis = Diagnosis::CN;
  Split split = Split::Train;
};

/// Dataset membership. Serialized as a JSON array of entry objects.
struct CohortManifest {
  std::vector<ManifestEntry> entries;

  void validate() const {
    std::set<std::string> ids;
    for (const auto& e : entries) {
      if (e.subject_id.empty()) throw ValidationError("empty subject_id in manifest");
      if (!ids.insert(e.subject_id).second) throw ValidationError("duplicate subject_id " + e.subject_id);
      if (!(e.age >= 18.0 && e.age <= 110.0))
        throw ValidationError("age of " + e.subject_id + " outside [18, 110]");
    }
  }
};

inline nlohmann::json to_json(const CohortManifest& m) {
  auto arr = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j;
    j["subject_id"] = e.subject_id;
    j["volume"] = e.volume;
    j["labels"] = e.labels;
    j["age"] = e.age;
    j["diagnosis"] = std::string(to_string(e.diagnosis));
    j["split"] = std::string(to_string(e.split));
    arr.push_back(std::move(j));
  }
  return arr;
}

inline CohortManifest manifest_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("cohort manifest must be a JSON array");
  CohortManifest m;
  for (const auto& o : j) {
    try {
      m.entries.push_back({o.at("subject_id").get<std::string>(), o.at("volume").get<std::string>(),
                           o.at("labels").get<std::string>(), o.at("age").get<double>(),
                           parse_diagnosis(o.at("diagnosis").get<std::string>()),
                           parse_split(o.at("split").get<std::string>())});
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("bad manifest entry: ") + ex.what());
    }
  }
  m.validate();
  return m;
}

inline void write_manifest(const CohortManifest& m, const std::filesystem::path& path) {
  m.validate();
  detail::write_text(path, to_json(m).dump(2) + "\n");
}

/// Reads and validates a manifest; every referenced file must exist.
inline CohortManifest read_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  auto m = manifest_from_json(j);
  const auto base = path.parent_path();
  for (const auto& e : m.entries)
    for (const auto& rel : {e.volume, e.labels})
      if (!std::filesystem::exists(base / rel))
        throw ValidationError("manifest entry " + e.subject_id + " references missing file " + (base / rel).string());
  return m;
}

/// A subject held in memory.
struct Subject {
  std::string id;
  Volume3D volume;
  LabelMap3D labels;
  double age = 0.0;
  Diagnosis diagnosis = Diagnosis::CN;
};

inline std::vector<Subject> load_subjects(const CohortManifest& m, const std::filesystem::path& manifest_dir) {
  std::vector<Subject> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    Subject s{e.subject_id, read_volume(manifest_dir / e.volume), read_labels(manifest_dir / e.labels), e.age,
              e.diagnosis};
    if (!(s.volume.dims() == s.labels.dims()))
      throw ValidationError("volume and label dims differ for " + e.subject_id);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace deepgrade
