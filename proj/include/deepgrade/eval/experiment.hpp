#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/classify/features.hpp"
#include "deepgrade/classify/gcn.hpp"
#include "deepgrade/classify/svm.hpp"
#include "deepgrade/cohort.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/eval/fusion.hpp"
#include "deepgrade/eval/metrics.hpp"
#include "deepgrade/eval/split.hpp"
#include "deepgrade/grading.hpp"
#include "deepgrade/rng.hpp"

namespace deepgrade::eval {

/// A classification task: which diagnoses take part and the class each maps to.
struct Task {
  std::string id;
  std::vector<std::string> class_names;
  std::map<Diagnosis, int> class_of;

  std::size_t classes() const { return class_names.size(); }
  bool includes(Diagnosis d) const { return class_of.count(d) > 0; }
};

inline const std::vector<Task>& all_tasks() {
  static const std::vector<Task> tasks{
      {"dem_vs_cn", {"CN", "Dementia"}, {{Diagnosis::CN, 0}, {Diagnosis::AD, 1}, {Diagnosis::FTD, 1}}},
      {"ad_vs_cn", {"CN", "AD"}, {{Diagnosis::CN, 0}, {Diagnosis::AD, 1}}},
      {"ftd_vs_cn", {"CN", "FTD"}, {{Diagnosis::CN, 0}, {Diagnosis::FTD, 1}}},
      {"ad_vs_ftd", {"AD", "FTD"}, {{Diagnosis::AD, 0}, {Diagnosis::FTD, 1}}},
      {"cn_vs_ad_vs_ftd", {"CN", "AD", "FTD"}, {{Diagnosis::CN, 0}, {Diagnosis::AD, 1}, {Diagnosis::FTD, 2}}},
  };
  return tasks;
}

inline const Task& find_task(const std::string& id) {
  for (const auto& t : all_tasks())
    if (t.id == id) return t;
  std::string known;
  for (const auto& t : all_tasks()) known += (known.empty() ? "" : ", ") + t.id;
  throw ValidationError("unknown task '" + id + "' (known: " + known + ")");
}

struct ExperimentConfig {
  std::string task = "cn_vs_ad_vs_ftd";
  unsigned repetitions = 3;
  std::uint64_t seed = 1;
  std::vector<double> split_fractions{0.6, 0.2, 0.2};
  grading::GradingConfig grading;
  classify::GCNConfig gcn;
  classify::SVMSearchConfig svm;
  unsigned top_n = 10;

  void validate() const {
    find_task(task);
    if (repetitions < 1) throw ValidationError("repetitions must be >= 1");
    if (split_fractions.size() != 3) throw ValidationError("experiment split fractions must list train, val and test");
    for (double f : split_fractions)
      if (!(f > 0.0)) throw ValidationError("every experiment split fraction must be positive");
    grading.validate();
    gcn.validate();
    svm.validate();
    if (top_n < 1) throw ValidationError("top_n must be >= 1");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"task", c.task},
          {"repetitions", c.repetitions},
          {"seed", c.seed},
          {"split_fractions", c.split_fractions},
          {"grading", grading::to_json(c.grading)},
          {"gcn", classify::to_json(c.gcn)},
          {"svm", classify::to_json(c.svm)},
          {"top_n", c.top_n}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.task = j.value("task", c.task);
  c.repetitions = j.value("repetitions", c.repetitions);
  c.seed = j.value("seed", c.seed);
  c.split_fractions = j.value("split_fractions", c.split_fractions);
  if (j.contains("grading")) c.grading = grading::grading_config_from_json(j.at("grading"));
  if (j.contains("gcn")) c.gcn = classify::gcn_config_from_json(j.at("gcn"));
  if (j.contains("svm")) c.svm = classify::svm_config_from_json(j.at("svm"));
  c.top_n = j.value("top_n", c.top_n);
  c.validate();
  return c;
}

/// Everything the classifiers consume for one subject.
struct SubjectFeatures {
  grading::StructureGradingVector grading;
  classify::StructureGraph graph;
  std::vector<double> volumes;
};

inline unsigned structure_count(const std::vector<const Subject*>& subjects) {
  unsigned s = 0;
  for (const auto* x : subjects) s = std::max<unsigned>(s, x->labels.max_label());
  if (s < 2) throw ValidationError("cohort label maps contain fewer than two structures");
  return s;
}

inline std::vector<SubjectFeatures> extract_features(const std::vector<const Subject*>& subjects,
                                                     const std::vector<Volume3D>& maps, unsigned s) {
  std::vector<SubjectFeatures> out;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto* x = subjects[i];
    SubjectFeatures f;
    f.grading = grading::aggregate_structure_scores(maps[i], x->labels, s, x->age);
    f.grading.subject_id = x->id;
    f.grading.diagnosis = x->diagnosis;
    f.graph = classify::build_graph(f.grading);
    f.volumes = classify::compute_volume_features(x->labels, s);
    out.push_back(std::move(f));
  }
  return out;
}

/// Per-voxel majority label over the given label maps, ties to the smaller
/// label. Serves as the shared atlas for group-level structure rankings.
inline LabelMap3D consensus_labels(const std::vector<const LabelMap3D*>& maps, unsigned s) {
  if (maps.empty()) throw ValidationError("consensus needs at least one label map");
  LabelMap3D out = *maps.front();
  std::vector<unsigned> votes(s + 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::fill(votes.begin(), votes.end(), 0u);
    for (const auto* m : maps) {
      if (!(m->dims() == out.dims())) throw ValidationError("label maps differ in dims");
      const auto l = (*m)[i];
      if (l > s) throw ValidationError("label exceeds structure count");
      ++votes[l];
    }
    out[i] = static_cast<std::uint16_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

struct TrainedClassifiers {
  classify::GCNModel<float> gcn;
  classify::GCNHistory gcn_history;
  classify::GridSearchResult svm;
  AlphaFit alpha;
};

struct Predictions {
  std::vector<std::vector<double>> gcn, svm, fused;
};

inline Predictions predict(const TrainedClassifiers& c, const std::vector<SubjectFeatures>& feats) {
  Predictions p;
  std::vector<classify::StructureGraph> graphs;
  for (const auto& f : feats) graphs.push_back(f.graph);
  p.gcn = classify::gcn_predict(c.gcn, graphs);
  for (const auto& f : feats) p.svm.push_back(classify::svm_predict_proba(c.svm.model, f.volumes));
  p.fused = fuse_all(p.gcn, p.svm, c.alpha.alpha);
  return p;
}

/// GCN on grading graphs and SVM on volumes share the training subjects; both
/// use the validation subjects for model selection; alpha is fitted on the
/// training subjects' predictions.
inline TrainedClassifiers train_classifiers(const std::vector<SubjectFeatures>& train, std::span<const int> train_cls,
                                            const std::vector<SubjectFeatures>& val, std::span<const int> val_cls,
                                            std::size_t classes, const ExperimentConfig& config, std::uint64_t seed,
                                            int workers = 1) {
  std::vector<classify::StructureGraph> tg, vg;
  classify::Matrix tx, vx;
  for (const auto& f : train) {
    tg.push_back(f.graph);
    tx.push_back(f.volumes);
  }
  for (const auto& f : val) {
    vg.push_back(f.graph);
    vx.push_back(f.volumes);
  }
  classify::GCNHistory hist;
  auto gcn = classify::train_gcn(tg, train_cls, vg, val_cls, classes, config.gcn, derive_seed(seed, {0x6C7}), &hist);
  auto svm = classify::grid_search_svm(tx, train_cls, vx, val_cls, classes, config.svm, workers);
  TrainedClassifiers c{std::move(gcn), std::move(hist), std::move(svm), {}};
  const auto p = predict(c, train);
  c.alpha = fit_alpha(p.gcn, p.svm, train_cls, classes);
  return c;
}

struct MetricSet {
  double acc = 0.0, bacc = 0.0, auc = 0.0;
  std::vector<double> sensitivity;
  std::vector<std::size_t> confusion;  // row-major, rows = true class
};

inline MetricSet compute_metrics(const std::vector<std::vector<double>>& probs, std::span<const int> truth,
                                 std::size_t classes) {
  const auto cm = ConfusionMatrix::from(truth, argmax_rows(probs), classes);
  MetricSet m;
  m.acc = cm.accuracy();
  m.bacc = cm.balanced_accuracy();
  m.auc = auc(probs, truth, classes);
  for (std::size_t c = 0; c < classes; ++c) {
    m.sensitivity.push_back(cm.sensitivity(c));
    for (std::size_t p = 0; p < classes; ++p) m.confusion.push_back(cm.at(c, p));
  }
  return m;
}

inline nlohmann::json to_json(const MetricSet& m) {
  return {{"acc", m.acc}, {"bacc", m.bacc}, {"auc", m.auc}, {"sensitivity", m.sensitivity}, {"confusion", m.confusion}};
}

struct GroupLocalization {
  std::string group;
  std::size_t members = 0;
  std::vector<double> scores;  // per structure on the group-average map
};

struct RepetitionResult {
  unsigned index = 0;
  std::uint64_t seed = 0;
  std::size_t train = 0, val = 0, test = 0;
  double grading_initial_loss = 0.0, grading_final_loss = 0.0;
  AlphaFit alpha;
  MetricSet fused, gcn, svm;
  std::string svm_kernel;
  double svm_c = 0.0, svm_val_bacc = 0.0;
  std::size_t svm_failed_cells = 0;
  std::size_t gcn_best_epoch = 0;
  double gcn_val_bacc = 0.0;
  std::vector<GroupLocalization> groups;
};

struct EvaluationReport {
  std::string task;
  std::vector<std::string> class_names;
  unsigned structures = 0;
  std::vector<RepetitionResult> repetitions;

  /// Mean over repetitions of a per-repetition value.
  template <class Fn>
  double mean(Fn&& get) const {
    double s = 0.0;
    for (const auto& r : repetitions) s += get(r);
    return s / static_cast<double>(repetitions.size());
  }

  /// Per-structure scores of a group averaged over repetitions, if present in all.
  std::optional<std::vector<double>> mean_group_scores(const std::string& group) const {
    std::vector<double> sum(structures, 0.0);
    for (const auto& r : repetitions) {
      auto it = std::find_if(r.groups.begin(), r.groups.end(), [&](const auto& g) { return g.group == group; });
      if (it == r.groups.end()) return std::nullopt;
      for (unsigned j = 0; j < structures; ++j) sum[j] += it->scores[j];
    }
    for (auto& v : sum) v /= static_cast<double>(repetitions.size());
    return sum;
  }
};

inline nlohmann::json to_json(const EvaluationReport& r, unsigned top_n) {
  auto metric_mean = [&](auto select) {
    nlohmann::json j;
    j["acc"] = r.mean([&](const auto& x) { return select(x).acc; });
    j["bacc"] = r.mean([&](const auto& x) { return select(x).bacc; });
    j["auc"] = r.mean([&](const auto& x) { return select(x).auc; });
    std::vector<double> sens;
    for (std::size_t c = 0; c < r.class_names.size(); ++c)
      sens.push_back(r.mean([&](const auto& x) { return select(x).sensitivity[c]; }));
    j["sensitivity"] = sens;
    return j;
  };
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& x : r.repetitions) {
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& g : x.groups) groups[g.group] = {{"members", g.members}, {"scores", g.scores}};
    reps.push_back({{"index", x.index},
                    {"seed", x.seed},
                    {"subjects", {{"train", x.train}, {"val", x.val}, {"test", x.test}}},
                    {"grading_loss", {{"initial", x.grading_initial_loss}, {"final", x.grading_final_loss}}},
                    {"alpha", x.alpha.alpha},
                    {"fit_bacc", {{"fused", x.alpha.bacc}, {"gcn", x.alpha.bacc_gcn}, {"svm", x.alpha.bacc_svm}}},
                    {"test", {{"fused", to_json(x.fused)}, {"gcn", to_json(x.gcn)}, {"svm", to_json(x.svm)}}},
                    {"svm_selection",
                     {{"kernel", x.svm_kernel}, {"C", x.svm_c}, {"val_bacc", x.svm_val_bacc},
                      {"failed_cells", x.svm_failed_cells}}},
                    {"gcn_selection", {{"best_epoch", x.gcn_best_epoch}, {"val_bacc", x.gcn_val_bacc}}},
                    {"groups", groups}});
  }
  nlohmann::json loc = nlohmann::json::object();
  for (auto d : kAllDiagnoses) {
    const std::string g(to_string(d));
    if (auto scores = r.mean_group_scores(g)) {
      nlohmann::json top = nlohmann::json::array();
      for (const auto& t : grading::rank_structures(*scores, top_n))
        top.push_back({{"structure_id", t.id}, {"score", t.score}});
      loc[g] = {{"scores", *scores}, {"top", top}};
    }
  }
  return {{"task", r.task},
          {"classes", r.class_names},
          {"structures", r.structures},
          {"repetition_count", r.repetitions.size()},
          {"mean",
           {{"fused", metric_mean([](const RepetitionResult& x) -> const MetricSet& { return x.fused; })},
            {"gcn", metric_mean([](const RepetitionResult& x) -> const MetricSet& { return x.gcn; })},
            {"svm", metric_mean([](const RepetitionResult& x) -> const MetricSet& { return x.svm; })},
            {"alpha", r.mean([](const auto& x) { return x.alpha.alpha; })}}},
          {"localization", loc},
          {"repetitions", reps}};
}

inline std::string confusion_csv(const EvaluationReport& r) {
  std::string out = "repetition,model,true,predicted,count\n";
  for (const auto& x : r.repetitions)
    for (const auto& [name, m] : {std::pair<const char*, const MetricSet*>{"fused", &x.fused}, {"gcn", &x.gcn}, {"svm", &x.svm}})
      for (std::size_t t = 0; t < r.class_names.size(); ++t)
        for (std::size_t p = 0; p < r.class_names.size(); ++p)
          out += std::to_string(x.index) + "," + name + "," + r.class_names[t] + "," + r.class_names[p] + "," +
                 std::to_string(m->confusion[t * r.class_names.size() + p]) + "\n";
  return out;
}

using ProgressFn = std::function<void(const std::string&)>;

/// One repetition: re-split the cohort (stratified by diagnosis), train the
/// grading ensemble on every training subject, then GCN, SVM and fusion on the
/// task's subjects, and score the held-out test subjects.
inline RepetitionResult run_repetition(const std::vector<Subject>& cohort, const ExperimentConfig& config, unsigned r,
                                       int workers, const ProgressFn& progress = {}) {
  const Task& task = find_task(config.task);
  const std::uint64_t seed = config.seed + r;
  auto log = [&](const std::string& m) {
    if (progress) progress("repetition " + std::to_string(r) + ": " + m);
  };
  std::vector<int> diag;
  for (const auto& s : cohort) diag.push_back(static_cast<int>(s.diagnosis));
  const auto part = stratified_split(diag, config.split_fractions, derive_seed(seed, {0x5E7}));

  std::vector<const Subject*> all, grading_train;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    all.push_back(&cohort[i]);
    if (part[i] == 0) grading_train.push_back(&cohort[i]);
  }
  const unsigned s = structure_count(all);

  log("training grading ensemble on " + std::to_string(grading_train.size()) + " subjects");
  grading::TrainingHistory hist;
  const auto ens = grading::train_ensemble(grading_train, config.grading, derive_seed(seed, {0x6AD}), workers, &hist);
  log("grading all subjects");
  const auto maps = grading::infer_grading_maps(ens, all, workers);
  const auto feats = extract_features(all, maps, s);

  RepetitionResult res;
  res.index = r;
  res.seed = seed;
  for (const auto& h : hist.locations) {
    res.grading_initial_loss += h.initial_loss / static_cast<double>(hist.locations.size());
    res.grading_final_loss += h.epoch_loss.back() / static_cast<double>(hist.locations.size());
  }

  std::vector<SubjectFeatures> f[3];
  std::vector<int> cls[3];
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (!task.includes(cohort[i].diagnosis)) continue;
    f[part[i]].push_back(feats[i]);
    cls[part[i]].push_back(task.class_of.at(cohort[i].diagnosis));
  }
  res.train = f[0].size();
  res.val = f[1].size();
  res.test = f[2].size();
  for (int p = 0; p < 3; ++p)
    for (std::size_t c = 0; c < task.classes(); ++c)
      if (std::count(cls[p].begin(), cls[p].end(), static_cast<int>(c)) == 0)
        throw ValidationError("split part " + std::to_string(p) + " has no subject of class " + task.class_names[c]);

  log("training classifiers");
  const auto clf = train_classifiers(f[0], cls[0], f[1], cls[1], task.classes(), config, seed, workers);
  const auto pred = predict(clf, f[2]);
  res.alpha = clf.alpha;
  res.fused = compute_metrics(pred.fused, cls[2], task.classes());
  res.gcn = compute_metrics(pred.gcn, cls[2], task.classes());
  res.svm = compute_metrics(pred.svm, cls[2], task.classes());
  res.svm_kernel = classify::to_string(clf.svm.kernel);
  res.svm_c = clf.svm.c;
  res.svm_val_bacc = clf.svm.val_bacc;
  for (const auto& cell : clf.svm.cells)
    if (!cell.val_bacc) ++res.svm_failed_cells;
  res.gcn_best_epoch = clf.gcn_history.best_epoch;
  res.gcn_val_bacc = clf.gcn_history.best_epoch ? clf.gcn_history.val_bacc[clf.gcn_history.best_epoch - 1] : 0.0;

  // Group averages of test maps, aggregated on a consensus atlas built from
  // the training CN subjects (all training subjects if there are none).
  std::vector<const LabelMap3D*> atlas_src;
  for (const auto* x : grading_train)
    if (x->diagnosis == Diagnosis::CN) atlas_src.push_back(&x->labels);
  if (atlas_src.empty())
    for (const auto* x : grading_train) atlas_src.push_back(&x->labels);
  const auto atlas = consensus_labels(atlas_src, s);
  for (auto d : kAllDiagnoses) {
    std::vector<Volume3D> members;
    for (std::size_t i = 0; i < cohort.size(); ++i)
      if (part[i] == 2 && cohort[i].diagnosis == d) members.push_back(maps[i]);
    if (members.empty()) continue;
    const auto avg = grading::group_average_map(members);
    res.groups.push_back({std::string(to_string(d)), members.size(),
                          grading::aggregate_structure_scores(avg, atlas, s, 0.0).scores});
  }
  log("test BACC fused " + std::to_string(res.fused.bacc) + ", GCN " + std::to_string(res.gcn.bacc) + ", SVM " +
      std::to_string(res.svm.bacc));
  return res;
}

inline EvaluationReport run_experiment(const std::vector<Subject>& cohort, const ExperimentConfig& config,
                                       int workers = 1, const ProgressFn& progress = {}) {
  config.validate();
  const Task& task = find_task(config.task);
  for (const auto& [d, c] : task.class_of)
    if (std::none_of(cohort.begin(), cohort.end(), [d = d](const Subject& s) { return s.diagnosis == d; }))
      throw ValidationError("cohort has no " + std::string(to_string(d)) + " subject required by task " + task.id);
  EvaluationReport report;
  report.task = task.id;
  report.class_names = task.class_names;
  std::vector<const Subject*> all;
  for (const auto& s : cohort) all.push_back(&s);
  report.structures = structure_count(all);
  for (unsigned r = 0; r < config.repetitions; ++r) {
    try {
      report.repetitions.push_back(run_repetition(cohort, config, r, workers, progress));
    } catch (const ValidationError& ex) {
      throw ValidationError("repetition " + std::to_string(r) + ": " + ex.what());
    } catch (const Error& ex) {
      throw Error("repetition " + std::to_string(r) + ": " + ex.what());
    }
  }
  return report;
}

}  // namespace deepgrade::eval
