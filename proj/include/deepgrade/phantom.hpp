#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/cohort.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/eval/split.hpp"
#include "deepgrade/parallel.hpp"
#include "deepgrade/rng.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade::phantom {

struct AgeRange {
  double lo = 60.0, hi = 80.0;
};

/// Synthetic cohort description. Structure ids are 1-based.
struct PhantomSpec {
  Dims dims{48, 56, 48};
  unsigned structures = 12;
  /// Unset means: AD hits the left-hemisphere structures (odd ids), FTD the
  /// right-hemisphere ones (even ids).
  std::optional<std::vector<unsigned>> affected_ad;
  std::optional<std::vector<unsigned>> affected_ftd;
  double severity = 0.35;
  double noise_sigma = 0.05;
  double smooth_jitter = 0.03;
  double anatomical_jitter = 1.0;
  std::array<AgeRange, 3> age_range{{{55.0, 85.0}, {60.0, 90.0}, {50.0, 80.0}}};  // CN, AD, FTD
  std::uint64_t seed = 1;

  void validate() const {
    if (dims.x < 16 || dims.y < 16 || dims.z < 16) throw ValidationError("phantom dims must each be >= 16");
    if (structures < 2 || structures > 65535) throw ValidationError("phantom structure count must be in [2, 65535]");
    if (!(severity > 0.0 && severity <= 1.0)) throw ValidationError("severity must lie in (0, 1]");
    if (!(noise_sigma >= 0.0) || !(smooth_jitter >= 0.0) || !(anatomical_jitter >= 0.0))
      throw ValidationError("noise and jitter levels must be non-negative");
    for (const auto& set : {affected_ad, affected_ftd}) {
      if (!set) continue;
      for (unsigned id : *set)
        if (id < 1 || id > structures) throw ValidationError("affected structure id " + std::to_string(id) + " out of range");
      if (set->size() >= structures) throw ValidationError("an affected set must leave at least one structure intact");
    }
    for (const auto& r : age_range)
      if (!(r.lo >= 18.0 && r.hi <= 110.0 && r.lo <= r.hi)) throw ValidationError("age ranges must lie within [18, 110]");
  }
};

inline nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json j;
  j["dims"] = {s.dims.x, s.dims.y, s.dims.z};
  j["structures"] = s.structures;
  j["affected_ad"] = s.affected_ad ? nlohmann::json(*s.affected_ad) : nlohmann::json(nullptr);
  j["affected_ftd"] = s.affected_ftd ? nlohmann::json(*s.affected_ftd) : nlohmann::json(nullptr);
  j["severity"] = s.severity;
  j["noise_sigma"] = s.noise_sigma;
  j["smooth_jitter"] = s.smooth_jitter;
  j["anatomical_jitter"] = s.anatomical_jitter;
  j["age_range"] = nlohmann::json::object();
  for (auto d : kAllDiagnoses) {
    const auto& r = s.age_range[static_cast<int>(d)];
    j["age_range"][std::string(to_string(d))] = {r.lo, r.hi};
  }
  j["seed"] = s.seed;
  return j;
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    if (j.contains("dims")) {
      auto d = j.at("dims").get<std::vector<std::uint32_t>>();
      if (d.size() != 3) throw ValidationError("phantom dims must have three entries");
      s.dims = {d[0], d[1], d[2]};
    }
    s.structures = j.value("structures", s.structures);
    for (auto [key, field] : {std::pair{"affected_ad", &s.affected_ad}, std::pair{"affected_ftd", &s.affected_ftd}})
      if (j.contains(key) && !j.at(key).is_null()) *field = j.at(key).get<std::vector<unsigned>>();
    s.severity = j.value("severity", s.severity);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.smooth_jitter = j.value("smooth_jitter", s.smooth_jitter);
    s.anatomical_jitter = j.value("anatomical_jitter", s.anatomical_jitter);
    if (j.contains("age_range"))
      for (auto d : kAllDiagnoses) {
        const auto key = std::string(to_string(d));
        if (!j.at("age_range").contains(key)) continue;
        auto r = j.at("age_range").at(key).get<std::vector<double>>();
        if (r.size() != 2) throw ValidationError("age range for " + key + " needs two values");
        s.age_range[static_cast<int>(d)] = {r[0], r[1]};
      }
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("bad phantom spec: ") + ex.what());
  }
  s.validate();
  return s;
}

using Point = std::array<double, 3>;

/// Cohort-level geometry shared by every subject generated from one spec.
struct Anatomy {
  Point center;
  Point radii;
  std::vector<Point> sites;          // index j holds the site of structure j + 1
  std::vector<double> base_intensity;  // per structure, index j for structure j + 1

  bool in_icc(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    const double dx = (x - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

inline Anatomy make_anatomy(const PhantomSpec& spec) {
  spec.validate();
  Anatomy a;
  a.center = {(spec.dims.x - 1) / 2.0, (spec.dims.y - 1) / 2.0, (spec.dims.z - 1) / 2.0};
  a.radii = {0.42 * spec.dims.x, 0.42 * spec.dims.y, 0.42 * spec.dims.z};

  Rng rng(derive_seed(spec.seed, {0xA7A70u}));
  const double icc_volume = 4.0 / 3.0 * std::numbers::pi * a.radii[0] * a.radii[1] * a.radii[2];
  double min_dist = 0.6 * std::cbrt(icc_volume / spec.structures);
  int rejections = 0;
  while (a.sites.size() < spec.structures) {
    Point p;
    double r2;
    do {
      for (int k = 0; k < 3; ++k) p[k] = rng.uniform(-1.0, 1.0);
      r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    } while (r2 > 1.0);
    for (int k = 0; k < 3; ++k) p[k] = a.center[k] + 0.8 * a.radii[k] * p[k];
    // Even-indexed sites go to the left half (smaller x), odd ones to the right.
    const bool want_right = a.sites.size() % 2 == 1;
    if ((p[0] > a.center[0]) != want_right) p[0] = 2.0 * a.center[0] - p[0];
    bool ok = true;
    for (const auto& q : a.sites) {
      const double d = std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]);
      if (d < min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      a.sites.push_back(p);
    } else if (++rejections % 2000 == 0) {
      min_dist *= 0.9;
    }
  }
  a.base_intensity.resize(spec.structures);
  for (auto& b : a.base_intensity) b = rng.uniform(0.8, 1.0);
  return a;
}

/// Affected structure ids for a diagnosis, sorted ascending. Empty for CN.
/// Default: AD takes the left-hemisphere sites (odd ids), FTD the right (even ids).
inline std::vector<unsigned> affected_structures(const PhantomSpec& spec, Diagnosis d) {
  if (d == Diagnosis::CN) return {};
  const auto& explicit_set = d == Diagnosis::AD ? spec.affected_ad : spec.affected_ftd;
  std::vector<unsigned> out;
  if (explicit_set) {
    out = *explicit_set;
  } else {
    for (unsigned j = 0; j < spec.structures; ++j) {
      const bool right = j % 2 == 1;
      if (right == (d == Diagnosis::FTD)) out.push_back(j + 1);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}


struct PhantomSubject {
  Volume3D volume;
  LabelMap3D labels;
  double age = 0.0;
  Diagnosis diagnosis = Diagnosis::CN;
};

namespace detail {

inline std::size_t nearest_site(const std::vector<Point>& sites, const std::vector<char>& allowed, double x, double y,
                                double z) {
  std::size_t best = sites.size();
  double best_d = 0.0;
  for (std::size_t j = 0; j < sites.size(); ++j) {
    if (!allowed.empty() && !allowed[j]) continue;
    const double dx = x - sites[j][0], dy = y - sites[j][1], dz = z - sites[j][2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (best == sites.size() || d < best_d) {
      best = j;
      best_d = d;
    }
  }
  return best;
}

}  // namespace detail

/// Generates one subject. All random draws happen before the disease effect
/// so that subjects sharing subject_seed differ only by that effect.
inline PhantomSubject generate_subject(const PhantomSpec& spec, const Anatomy& anatomy, Diagnosis diagnosis,
                                       std::uint64_t subject_seed, double age = 70.0) {
  const auto affected = affected_structures(spec, diagnosis);
  if (is_patient(diagnosis) && affected.empty())
    throw ValidationError("affected set for " + std::string(to_string(diagnosis)) + " is empty");

  Rng rng(subject_seed);
  std::vector<Point> sites = anatomy.sites;
  for (auto& p : sites)
    for (auto& c : p) c += spec.anatomical_jitter * rng.normal();

  struct Wave {
    double kx, ky, kz, phase;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves) {
    auto freq = [&] { return (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5); };
    w = {freq(), freq(), freq(), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  }

  // Structures are hemispheric: even-indexed sites own the left half, odd the right.
  std::vector<char> left(spec.structures), right(spec.structures);
  for (unsigned j = 0; j < spec.structures; ++j) (j % 2 == 0 ? left : right)[j] = 1;

  const Dims d = spec.dims;
  LabelMap3D labels(d);
  std::vector<double> noise;
  for (std::uint32_t z = 0; z < d.z; ++z)
    for (std::uint32_t y = 0; y < d.y; ++y)
      for (std::uint32_t x = 0; x < d.x; ++x) {
        if (!anatomy.in_icc(x, y, z)) continue;
        const auto& side = x < anatomy.center[0] ? left : right;
        labels.at(x, y, z) = static_cast<std::uint16_t>(detail::nearest_site(sites, side, x, y, z) + 1);
        noise.push_back(rng.normal());
      }

  std::vector<char> is_affected(spec.structures, 0);
  for (unsigned id : affected) is_affected[id - 1] = 1;

  if (!affected.empty()) {
    // One-voxel erosion: shell voxels move to the nearest intact structure of
    // the same hemisphere, or of the other one when the whole side is affected.
    std::vector<char> intact(spec.structures), intact_left(spec.structures), intact_right(spec.structures);
    bool any_left = false, any_right = false;
    for (unsigned j = 0; j < spec.structures; ++j) {
      intact[j] = !is_affected[j];
      intact_left[j] = intact[j] && left[j];
      intact_right[j] = intact[j] && right[j];
      any_left |= intact_left[j] != 0;
      any_right |= intact_right[j] != 0;
    }
    const LabelMap3D before = labels;
    for (std::uint32_t z = 0; z < d.z; ++z)
      for (std::uint32_t y = 0; y < d.y; ++y)
        for (std::uint32_t x = 0; x < d.x; ++x) {
          const auto l = before.at(x, y, z);
          if (l == 0 || !is_affected[l - 1]) continue;
          bool shell = false;
          const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
          for (const auto& o : off) {
            const long nx = long{x} + o[0], ny = long{y} + o[1], nz = long{z} + o[2];
            if (nx < 0 || ny < 0 || nz < 0 || nx >= d.x || ny >= d.y || nz >= d.z) continue;
            const auto nl = before.at(nx, ny, nz);
            if (nl != 0 && nl != l) {
              shell = true;
              break;
            }
          }
          if (!shell) continue;
          const bool is_left = x < anatomy.center[0];
          const auto& pool = is_left ? (any_left ? intact_left : intact) : (any_right ? intact_right : intact);
          labels.at(x, y, z) = static_cast<std::uint16_t>(detail::nearest_site(sites, pool, x, y, z) + 1);
        }
  }

  Volume3D volume(d);
  const double factor = 1.0 - spec.severity;
  std::size_t ni = 0;
  for (std::uint32_t z = 0; z < d.z; ++z)
    for (std::uint32_t y = 0; y < d.y; ++y)
      for (std::uint32_t x = 0; x < d.x; ++x) {
        const auto l = labels.at(x, y, z);
        if (l == 0) continue;
        double field = 0.0;
        for (const auto& w : waves)
          field += std::sin(2.0 * std::numbers::pi * (w.kx * x / d.x + w.ky * y / d.y + w.kz * z / d.z) + w.phase);
        double v = anatomy.base_intensity[l - 1] + spec.smooth_jitter * field / 3.0;
        if (is_affected[l - 1]) v *= factor;
        v += spec.noise_sigma * noise[ni++];
        volume.at(x, y, z) = static_cast<float>(v);
      }
  return {std::move(volume), std::move(labels), age, diagnosis};
}

inline PhantomSubject generate_subject(const PhantomSpec& spec, Diagnosis diagnosis, std::uint64_t subject_seed,
                                       double age = 70.0) {
  return generate_subject(spec, make_anatomy(spec), diagnosis, subject_seed, age);
}

using ClassCounts = std::map<Diagnosis, std::size_t>;

inline std::string subject_id(Diagnosis d, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03zu", std::string(to_string(d)).c_str(), index);
  return buf;
}

/// In-memory cohort in (CN, AD, FTD) order, then by index.
inline std::vector<Subject> generate_subjects(const PhantomSpec& spec, const ClassCounts& counts, int workers = 1) {
  const Anatomy anatomy = make_anatomy(spec);
  struct Job {
    Diagnosis d;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (auto d : kAllDiagnoses) {
    auto it = counts.find(d);
    if (it == counts.end()) continue;
    if (it->second == 0) throw ValidationError("requested class " + std::string(to_string(d)) + " with zero subjects");
    for (std::size_t i = 0; i < it->second; ++i) jobs.push_back({d, i});
  }
  if (jobs.empty()) throw ValidationError("no subjects requested");
  std::vector<Subject> out(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t k) {
    const auto [d, i] = jobs[k];
    const auto di = static_cast<std::uint64_t>(d);
    const auto& range = spec.age_range[static_cast<int>(d)];
    Rng age_rng(derive_seed(spec.seed, {0xA6Eu, di, i}));
    const double age = std::clamp(std::round(age_rng.uniform(range.lo, range.hi) * 10.0) / 10.0, range.lo, range.hi);
    auto s = generate_subject(spec, anatomy, d, derive_seed(spec.seed, {0x5B7u, di, i}), age);
    out[k] = Subject{subject_id(d, i), std::move(s.volume), std::move(s.labels), age, d};
  });
  return out;
}

/// Writes subjects/<id>.gvl, subjects/<id>.gsg and manifest.json under out_dir.
/// split_fractions are (train, val[, test]).
inline CohortManifest generate_cohort(const PhantomSpec& spec, const ClassCounts& counts,
                                      const std::vector<double>& split_fractions, const std::filesystem::path& out_dir,
                                      int workers = 1) {
  if (split_fractions.empty() || split_fractions.size() > 3)
    throw ValidationError("split fractions must list train, val and optionally test");
  auto subjects = generate_subjects(spec, counts, workers);
  std::vector<int> classes;
  for (const auto& s : subjects) classes.push_back(static_cast<int>(s.diagnosis));
  const auto parts = eval::stratified_split(classes, split_fractions, derive_seed(spec.seed, {0x5917u}));

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "subjects", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "subjects").string() + ": " + ec.message());
  CohortManifest m;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    const std::string vol = "subjects/" + s.id + ".gvl";
    const std::string lab = "subjects/" + s.id + ".gsg";
    write_volume(s.volume, out_dir / vol);
    write_labels(s.labels, out_dir / lab);
    m.entries.push_back({s.id, vol, lab, s.age, s.diagnosis, static_cast<Split>(parts[i])});
  }
  write_manifest(m, out_dir / "manifest.json");
  deepgrade::detail::write_text(out_dir / "phantom_spec.json", to_json(spec).dump(2) + "\n");
  return m;
}

}  // namespace deepgrade::phantom
