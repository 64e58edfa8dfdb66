#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/binary_io.hpp"
#include "deepgrade/cohort.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/neural/adam.hpp"
#include "deepgrade/neural/checkpoint.hpp"
#include "deepgrade/neural/unet.hpp"
#include "deepgrade/parallel.hpp"
#include "deepgrade/rng.hpp"
#include "deepgrade/tiler.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade::grading {

struct GradingConfig {
  unsigned k = 3;
  Dims patch{12, 16, 12};
  nn::UNetConfig unet;
  unsigned epochs = 6;
  unsigned batch_size = 2;
  double learning_rate = 2e-3;
  /// Per-epoch CN share relative to all patients combined, reached by seeded
  /// duplication of the short side; 0 keeps the natural mix.
  double cn_ratio = 2.0;

  void validate() const {
    if (k < 1) throw ValidationError("grid k must be >= 1");
    if (patch.x == 0 || patch.y == 0 || patch.z == 0) throw ValidationError("patch dims must be positive");
    unet.validate();
    if (!unet.accepts(patch))
      throw ValidationError("patch " + patch.str() + " is not divisible by 2^(levels-1)");
    if (epochs < 1) throw ValidationError("grading epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("grading batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("grading learning rate must be positive");
    if (!(cn_ratio >= 0.0)) throw ValidationError("grading cn_ratio must be >= 0");
  }
};

inline nlohmann::json to_json(const GradingConfig& c) {
  return {{"k", c.k},
          {"patch", {c.patch.x, c.patch.y, c.patch.z}},
          {"unet", nn::to_json(c.unet)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"cn_ratio", c.cn_ratio}};
}

inline GradingConfig grading_config_from_json(const nlohmann::json& j) {
  GradingConfig c;
  c.k = j.value("k", c.k);
  if (j.contains("patch")) {
    auto p = j.at("patch").get<std::array<std::uint32_t, 3>>();
    c.patch = {p[0], p[1], p[2]};
  }
  if (j.contains("unet")) c.unet = nn::unet_config_from_json(j.at("unet"));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.cn_ratio = j.value("cn_ratio", c.cn_ratio);
  c.validate();
  return c;
}

/// +1 inside the ICC for patients, -1 for CN, 0 outside.
inline Volume3D make_target(Diagnosis diagnosis, const Volume3D& icc_mask_patch) {
  Volume3D t(icc_mask_patch.dims(), icc_mask_patch.spacing());
  const float inside = is_patient(diagnosis) ? 1.0f : -1.0f;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = icc_mask_patch[i] != 0.0f ? inside : 0.0f;
  return t;
}

/// Cohort-level intensity statistics over ICC voxels, used as a fixed affine
/// normalization shared by every subject.
struct IntensityNorm {
  double mean = 0.0;
  double stddev = 1.0;
};

inline IntensityNorm fit_intensity_norm(const std::vector<const Subject*>& subjects) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto* s : subjects)
    for (std::size_t i = 0; i < s->volume.size(); ++i)
      if (s->labels[i] > 0) {
        const double v = s->volume[i];
        sum += v;
        sq += v * v;
        ++n;
      }
  if (n < 2) throw DegenerateInputError("training subjects have fewer than two ICC voxels");
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  if (!(var > 0.0)) throw DegenerateInputError("training ICC intensities have zero variance");
  return {mean, std::sqrt(var)};
}

/// Network input at grid resolution: cohort-normalized inside the ICC, zero
/// outside, then halved.
inline Volume3D prepare_input(const Volume3D& volume, const LabelMap3D& labels, const IntensityNorm& norm) {
  if (!(volume.dims() == labels.dims()))
    throw ValidationError("volume dims " + volume.dims().str() + " differ from label dims " + labels.dims().str());
  Volume3D v(volume.dims(), volume.spacing());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = labels[i] > 0 ? static_cast<float>((volume[i] - norm.mean) / norm.stddev) : 0.0f;
  return downsample2(v);
}

/// ICC mask at grid resolution: a voxel is inside when at least half of its
/// source block is.
inline Volume3D downsampled_icc_mask(const LabelMap3D& labels) {
  Volume3D m = downsample2(labels.icc_mask());
  for (auto& v : m.values()) v = v >= 0.5f ? 1.0f : 0.0f;
  return m;
}

class GradingEnsemble {
 public:
  GradingEnsemble(GradingConfig config, Dims input_dims, std::uint64_t seed, IntensityNorm norm = {})
      : config_(std::move(config)), input_dims_(input_dims), seed_(seed), norm_(norm) {
    config_.validate();
    const Dims grid_dims{(input_dims.x + 1) / 2, (input_dims.y + 1) / 2, (input_dims.z + 1) / 2};
    grid_ = plan_grid(grid_dims, config_.patch, config_.k);
    models_.reserve(grid_.locations());
    for (std::size_t l = 0; l < grid_.locations(); ++l) models_.emplace_back(config_.unet, model_seed(l));
  }

  const GradingConfig& config() const { return config_; }
  const PatchGrid& grid() const { return grid_; }
  Dims input_dims() const { return input_dims_; }
  std::uint64_t seed() const { return seed_; }
  const IntensityNorm& norm() const { return norm_; }
  std::size_t size() const { return models_.size(); }
  nn::UNet<float>& model(std::size_t l) { return models_.at(l); }
  const nn::UNet<float>& model(std::size_t l) const { return models_.at(l); }

  std::uint64_t model_seed(std::size_t l) const { return derive_seed(seed_, {0x6EAD, l}); }

  /// Grid-resolution prediction for location l over a batch of prepared inputs.
  std::vector<Volume3D> predict_location(std::size_t l, std::span<const Volume3D* const> inputs) const {
    std::vector<Volume3D> patches;
    patches.reserve(inputs.size());
    for (const auto* v : inputs) patches.push_back(extract_patch(*v, grid_, l));
    std::vector<const Volume3D*> ptrs;
    for (const auto& p : patches) ptrs.push_back(&p);
    nn::NoGradGuard no_grad;
    const auto out = models_.at(l).forward(nn::volumes_to_tensor<float>(ptrs));
    std::vector<Volume3D> result;
    for (std::size_t n = 0; n < inputs.size(); ++n) result.push_back(nn::tensor_to_volume(out, n, inputs[n]->spacing()));
    return result;
  }

 private:
  GradingConfig config_;
  Dims input_dims_;
  std::uint64_t seed_;
  IntensityNorm norm_;
  PatchGrid grid_;
  std::vector<nn::UNet<float>> models_;
};

struct LocationHistory {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
};

struct TrainingHistory {
  std::vector<LocationHistory> locations;
};

struct TrainingSample {
  const Volume3D* input;  // prepared, grid resolution
  const Volume3D* icc;    // downsampled ICC mask
  Diagnosis diagnosis;
};

namespace detail {

/// Epoch visiting order: every sample once, plus seeded duplicates of CN or
/// patients until |CN| / |patients| reaches cn_ratio (rounded up).
inline std::vector<std::size_t> epoch_order(const std::vector<TrainingSample>& samples, double cn_ratio, Rng& rng) {
  std::vector<std::size_t> cn, pat;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_patient(samples[i].diagnosis) ? pat : cn).push_back(i);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (cn_ratio > 0.0 && !cn.empty() && !pat.empty()) {
    const auto want_cn = static_cast<std::size_t>(std::ceil(cn_ratio * static_cast<double>(pat.size()) - 1e-9));
    const auto want_pat = static_cast<std::size_t>(std::ceil(static_cast<double>(cn.size()) / cn_ratio - 1e-9));
    for (std::size_t i = cn.size(); i < want_cn; ++i) order.push_back(cn[rng.index(cn.size())]);
    if (want_cn <= cn.size())
      for (std::size_t i = pat.size(); i < want_pat; ++i) order.push_back(pat[rng.index(pat.size())]);
  }
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

}  // namespace detail

/// Trains model l on patches at origin l only. Deterministic per (seed, l).
inline LocationHistory train_location(GradingEnsemble& ens, std::size_t l, const std::vector<TrainingSample>& samples) {
  const auto& cfg = ens.config();
  const auto& grid = ens.grid();
  std::vector<Volume3D> inputs, targets;
  for (const auto& s : samples) {
    inputs.push_back(extract_patch(*s.input, grid, l));
    targets.push_back(make_target(s.diagnosis, extract_patch(*s.icc, grid, l)));
  }
  auto& model = ens.model(l);
  nn::AdamState<float> opt;
  opt.config.lr = cfg.learning_rate;
  Rng rng(derive_seed(ens.seed(), {0x7A1, l}));

  auto batch_loss = [&](std::span<const std::size_t> idx) {
    std::vector<const Volume3D*> in;
    std::vector<float> tgt;
    for (auto i : idx) {
      in.push_back(&inputs[i]);
      tgt.insert(tgt.end(), targets[i].values().begin(), targets[i].values().end());
    }
    const auto pred = model.forward(nn::volumes_to_tensor<float>(in));
    return nn::masked_mse_loss(pred, std::span<const float>(tgt));
  };

  LocationHistory h;
  {
    nn::NoGradGuard no_grad;
    double total = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::size_t one[1] = {i};
      total += batch_loss(one).item();
    }
    h.initial_loss = total / static_cast<double>(samples.size());
  }
  for (unsigned e = 0; e < cfg.epochs; ++e) {
    const auto order = detail::epoch_order(samples, cfg.cn_ratio, rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto loss = batch_loss(std::span<const std::size_t>(order).subspan(start, end - start));
      total += loss.item();
      ++batches;
      nn::backward(loss);
      nn::adam_step(model.params().vars(), opt);
    }
    h.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return h;
}

/// Trains one U-Net per grid location on all given subjects. CN subjects
/// receive -1 targets; AD and FTD are pooled as +1.
inline GradingEnsemble train_ensemble(const std::vector<const Subject*>& subjects, const GradingConfig& config,
                                      std::uint64_t seed, int workers = 1, TrainingHistory* history = nullptr,
                                      const std::function<void(std::size_t)>& on_location_done = {}) {
  config.validate();
  if (subjects.empty()) throw ValidationError("grading training set is empty");
  bool has_cn = false, has_patient = false;
  for (const auto* s : subjects) (is_patient(s->diagnosis) ? has_patient : has_cn) = true;
  if (!has_cn) throw ValidationError("grading training set has no CN subject");
  if (!has_patient) throw ValidationError("grading training set has no patient");
  const Dims dims = subjects.front()->volume.dims();
  for (const auto* s : subjects)
    if (!(s->volume.dims() == dims) || !(s->labels.dims() == dims))
      throw ValidationError("subject " + s->id + " has dims " + s->volume.dims().str() + ", expected " + dims.str());

  GradingEnsemble ens(config, dims, seed, fit_intensity_norm(subjects));
  std::vector<Volume3D> inputs, masks;
  inputs.reserve(subjects.size());
  masks.reserve(subjects.size());
  for (const auto* s : subjects) {
    inputs.push_back(prepare_input(s->volume, s->labels, ens.norm()));
    masks.push_back(downsampled_icc_mask(s->labels));
  }
  std::vector<TrainingSample> samples;
  for (std::size_t i = 0; i < subjects.size(); ++i) samples.push_back({&inputs[i], &masks[i], subjects[i]->diagnosis});

  std::vector<LocationHistory> hist(ens.size());
  parallel_for(ens.size(), workers, [&](std::size_t l) {
    hist[l] = train_location(ens, l, samples);
    if (on_location_done) on_location_done(l);
  });
  if (history) history->locations = std::move(hist);
  return ens;
}

/// Full-resolution grading maps for a batch of subjects: prepare, predict per
/// location, assemble, upsample, mask by ICC.
inline std::vector<Volume3D> infer_grading_maps(const GradingEnsemble& ens, const std::vector<const Subject*>& subjects,
                                                int workers = 1) {
  std::vector<Volume3D> inputs;
  for (const auto* s : subjects) {
    if (!(s->volume.dims() == ens.input_dims()) || !(s->labels.dims() == ens.input_dims()))
      throw ValidationError("subject " + s->id + " has dims " + s->volume.dims().str() + ", ensemble expects " +
                            ens.input_dims().str());
    inputs.push_back(prepare_input(s->volume, s->labels, ens.norm()));
  }
  std::vector<const Volume3D*> ptrs;
  for (const auto& v : inputs) ptrs.push_back(&v);
  std::vector<std::vector<Volume3D>> per_location(ens.size());
  parallel_for(ens.size(), workers, [&](std::size_t l) { per_location[l] = ens.predict_location(l, ptrs); });

  std::vector<Volume3D> maps;
  for (std::size_t n = 0; n < subjects.size(); ++n) {
    std::vector<Volume3D> preds;
    for (std::size_t l = 0; l < ens.size(); ++l) preds.push_back(std::move(per_location[l][n]));
    Volume3D map = upsample_trilinear(assemble(preds, ens.grid(), inputs[n].spacing()), ens.input_dims());
    const auto& labels = subjects[n]->labels;
    for (std::size_t i = 0; i < map.size(); ++i)
      if (labels[i] == 0) map[i] = 0.0f;
    maps.push_back(std::move(map));
  }
  return maps;
}

inline Volume3D infer_grading_map(const GradingEnsemble& ens, const Volume3D& volume, const LabelMap3D& labels) {
  Subject s{"subject", volume, labels, 0.0, Diagnosis::CN};
  return std::move(infer_grading_maps(ens, {&s}).front());
}

struct StructureGradingVector {
  std::vector<double> scores;  // index j holds structure j + 1
  double age = 0.0;
  std::string subject_id;
  std::optional<Diagnosis> diagnosis;
};

/// Mean of the map over each structure 1..s.
inline StructureGradingVector aggregate_structure_scores(const Volume3D& map, const LabelMap3D& labels, unsigned s,
                                                         double age) {
  if (!(map.dims() == labels.dims()))
    throw ValidationError("map dims " + map.dims().str() + " differ from label dims " + labels.dims().str());
  std::vector<double> sum(s + 1, 0.0);
  std::vector<std::size_t> count(s + 1, 0);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto l = labels[i];
    if (l == 0) continue;
    if (l > s) throw ValidationError("label " + std::to_string(l) + " exceeds structure count " + std::to_string(s));
    sum[l] += map[i];
    ++count[l];
  }
  StructureGradingVector g;
  g.age = age;
  g.scores.resize(s);
  for (unsigned j = 1; j <= s; ++j) {
    if (count[j] == 0) throw EmptyStructureError(j);
    g.scores[j - 1] = sum[j] / static_cast<double>(count[j]);
  }
  return g;
}

inline Volume3D group_average_map(std::span<const Volume3D> maps) {
  if (maps.empty()) throw ValidationError("cannot average an empty group");
  const auto& first = maps.front();
  std::vector<double> sum(first.size(), 0.0);
  for (const auto& m : maps) {
    if (!(m.dims() == first.dims())) throw ValidationError("group maps differ in dims");
    for (std::size_t i = 0; i < m.size(); ++i) sum[i] += m[i];
  }
  Volume3D out(first.dims(), first.spacing());
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = static_cast<float>(sum[i] / static_cast<double>(maps.size()));
  return out;
}

struct RankedStructure {
  unsigned id = 0;
  double score = 0.0;
};

/// Sorts by descending score, ties by ascending id, and keeps the first n.
inline std::vector<RankedStructure> rank_structures(std::span<const double> mean_scores, std::size_t n) {
  std::vector<RankedStructure> r;
  for (std::size_t j = 0; j < mean_scores.size(); ++j) r.push_back({static_cast<unsigned>(j + 1), mean_scores[j]});
  std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (n < r.size()) r.resize(n);
  return r;
}

/// Group-mean structure scores: each member's map is aggregated with its own
/// label map, then scores are averaged across members.
inline std::vector<double> group_structure_scores(std::span<const Volume3D> maps, std::span<const LabelMap3D* const> labels,
                                                  unsigned s) {
  if (maps.empty()) throw ValidationError("cannot rank structures of an empty group");
  if (maps.size() != labels.size()) throw ValidationError("group maps and label maps differ in count");
  std::vector<double> mean(s, 0.0);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto g = aggregate_structure_scores(maps[i], *labels[i], s, 0.0);
    for (unsigned j = 0; j < s; ++j) mean[j] += g.scores[j];
  }
  for (auto& v : mean) v /= static_cast<double>(maps.size());
  return mean;
}

inline std::vector<RankedStructure> top_n_structures(std::span<const Volume3D> maps,
                                                     std::span<const LabelMap3D* const> labels, unsigned s,
                                                     std::size_t n) {
  const auto mean = group_structure_scores(maps, labels, s);
  return rank_structures(mean, n);
}

// ---- persistence and exports ----

inline void save_ensemble(const GradingEnsemble& ens, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json meta{{"grid", to_json(ens.grid())},
                      {"config", to_json(ens.config())},
                      {"seed", ens.seed()},
                      {"intensity_mean", ens.norm().mean},
                      {"intensity_std", ens.norm().stddev},
                      {"input_dims", {ens.input_dims().x, ens.input_dims().y, ens.input_dims().z}},
                      {"locations", ens.size()}};
  deepgrade::detail::write_text(dir / "ensemble.json", meta.dump(2) + "\n");
  for (std::size_t l = 0; l < ens.size(); ++l)
    nn::write_checkpoint(ens.model(l).params().to_arrays(), dir / ("loc_" + std::to_string(l) + ".gnn1"));
}

inline GradingEnsemble load_ensemble(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(deepgrade::detail::read_text(dir / "ensemble.json"));
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError((dir / "ensemble.json").string() + ": " + ex.what());
  }
  const auto d = meta.at("input_dims").get<std::array<std::uint32_t, 3>>();
  GradingEnsemble ens(grading_config_from_json(meta.at("config")), {d[0], d[1], d[2]}, meta.at("seed").get<std::uint64_t>(),
                      {meta.at("intensity_mean").get<double>(), meta.at("intensity_std").get<double>()});
  if (meta.value("locations", ens.size()) != ens.size()) throw FormatError("ensemble metadata location count mismatch");
  for (std::size_t l = 0; l < ens.size(); ++l)
    ens.model(l).params().load_arrays(nn::read_checkpoint(dir / ("loc_" + std::to_string(l) + ".gnn1")));
  return ens;
}

inline std::string structure_csv(std::span<const double> scores) {
  std::string out = "structure_id,score\n";
  char buf[64];
  for (std::size_t j = 0; j < scores.size(); ++j) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", j + 1, scores[j]);
    out += buf;
  }
  return out;
}

inline std::string ranked_csv(std::span<const RankedStructure> ranked) {
  std::string out = "rank,structure_id,score\n";
  char buf[96];
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%u,%.9g\n", i + 1, ranked[i].id, ranked[i].score);
    out += buf;
  }
  return out;
}

/// 8-bit binary PGM of a 2-D slice, mapping [-1, 1] linearly to [0, 255].
inline std::string slice_pgm(const Volume3D& map, int axis) {
  const Dims d = map.dims();
  std::uint32_t w, h;
  std::function<float(std::uint32_t, std::uint32_t)> at;
  if (axis == 2) {  // axial: fixed z
    w = d.x, h = d.y;
    at = [&, z = d.z / 2](std::uint32_t u, std::uint32_t v) { return map.at(u, v, z); };
  } else if (axis == 1) {  // coronal: fixed y
    w = d.x, h = d.z;
    at = [&, y = d.y / 2](std::uint32_t u, std::uint32_t v) { return map.at(u, y, v); };
  } else {  // sagittal: fixed x
    w = d.y, h = d.z;
    at = [&, x = d.x / 2](std::uint32_t u, std::uint32_t v) { return map.at(x, u, v); };
  }
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::uint32_t v = h; v-- > 0;)  // top row first
    for (std::uint32_t u = 0; u < w; ++u) {
      const double g = std::clamp(static_cast<double>(at(u, v)), -1.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround((g + 1.0) * 127.5))));
    }
  return out;
}

/// Writes <stem>.gvl, <stem>_structures.csv and <stem>_{axial,coronal,sagittal}.pgm.
inline void export_grading_map(const Volume3D& map, std::span<const double> scores, const std::filesystem::path& dir,
                               const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_volume(map, dir / (stem + ".gvl"));
  deepgrade::detail::write_text(dir / (stem + "_structures.csv"), structure_csv(scores));
  const char* names[3] = {"sagittal", "coronal", "axial"};
  for (int a = 0; a < 3; ++a) deepgrade::detail::write_text(dir / (stem + "_" + names[a] + ".pgm"), slice_pgm(map, a));
}

}  // namespace deepgrade::grading
