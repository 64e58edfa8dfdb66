// deepgrade command-line front end.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deepgrade/binary_io.hpp"
#include "deepgrade/classify/features.hpp"
#include "deepgrade/classify/gcn.hpp"
#include "deepgrade/classify/svm.hpp"
#include "deepgrade/cohort.hpp"
#include "deepgrade/config.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/eval/experiment.hpp"
#include "deepgrade/grading.hpp"
#include "deepgrade/phantom.hpp"

namespace fs = std::filesystem;
using namespace deepgrade;

namespace {

/// Upstream artifact that a command needs but that is not on disk yet.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const fs::path& path, const std::string& producer)
      : Error("missing " + path.string() + "; run `deepgrade " + producer + "` with the same config and seed first") {}
};

void note(const std::string& msg) { std::cerr << "[deepgrade] " << msg << "\n"; }

struct Paths {
  const RunConfig& cfg;

  std::string tag(const std::string& command, const std::string& content) const {
    return command + "-s" + std::to_string(cfg.seed) + "-" + content_hash(content).substr(0, 12);
  }

  fs::path phantom_dir() const { return cfg.workdir / tag("phantom", phantom_section(cfg).dump()); }

  fs::path manifest() const { return cfg.manifest.empty() ? phantom_dir() / "manifest.json" : cfg.manifest; }

  std::string cohort_id() const {
    if (cfg.manifest.empty()) return phantom_section(cfg).dump();
    if (!fs::exists(cfg.manifest)) throw MissingArtifact(cfg.manifest, "phantom");
    return deepgrade::detail::read_text(cfg.manifest);
  }

  std::string ensemble_id() const { return cohort_id() + grading::to_json(cfg.experiment.grading).dump(); }

  fs::path ensemble_dir() const { return cfg.workdir / tag("train-grading", ensemble_id()); }

  fs::path grade_dir() const { return cfg.workdir / tag("grade", ensemble_id()); }

  fs::path classifiers_dir() const {
    const auto& e = cfg.experiment;
    return cfg.workdir / tag("train-classifiers", ensemble_id() + e.task + classify::to_json(e.gcn).dump() +
                                                      classify::to_json(e.svm).dump());
  }

  fs::path evaluate_dir() const {
    auto exp = eval::to_json(cfg.experiment);
    return cfg.workdir / tag("evaluate", cohort_id() + exp.dump());
  }

  fs::path topn_dir() const { return cfg.workdir / tag("report-topn", ensemble_id()); }
};

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

struct Cohort {
  CohortManifest manifest;
  std::vector<Subject> subjects;
};

Cohort load_cohort(const Paths& paths) {
  const auto m = paths.manifest();
  if (!fs::exists(m)) throw MissingArtifact(m, "phantom");
  Cohort c;
  c.manifest = read_manifest(m);
  c.subjects = load_subjects(c.manifest, m.parent_path());
  if (c.subjects.empty()) throw ValidationError("manifest " + m.string() + " lists no subjects");
  return c;
}

std::vector<const Subject*> in_split(const Cohort& c, Split split) {
  std::vector<const Subject*> out;
  for (std::size_t i = 0; i < c.subjects.size(); ++i)
    if (c.manifest.entries[i].split == split) out.push_back(&c.subjects[i]);
  return out;
}

std::vector<const Subject*> all_of(const Cohort& c) {
  std::vector<const Subject*> out;
  for (const auto& s : c.subjects) out.push_back(&s);
  return out;
}

grading::GradingEnsemble load_ensemble_or_fail(const Paths& paths) {
  const auto dir = paths.ensemble_dir();
  if (!fs::exists(dir / "ensemble.json")) throw MissingArtifact(dir, "train-grading");
  return grading::load_ensemble(dir);
}

int cmd_phantom(const RunConfig& cfg) {
  if (!cfg.manifest.empty()) throw ValidationError("config sets an explicit manifest; the phantom command would not be used");
  const Paths paths{cfg};
  const auto dir = paths.phantom_dir();
  note("generating phantom cohort in " + dir.string());
  const auto m = phantom::generate_cohort(cfg.phantom, cfg.counts, cfg.cohort_split, dir, cfg.workers);
  note(std::to_string(m.entries.size()) + " subjects written");
  std::cout << (dir / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train_grading(const RunConfig& cfg) {
  const Paths paths{cfg};
  const auto cohort = load_cohort(paths);
  const auto train = in_split(cohort, Split::Train);
  const auto dir = paths.ensemble_dir();
  note("training " + std::to_string(cfg.experiment.grading.k * cfg.experiment.grading.k * cfg.experiment.grading.k) +
       " location models on " + std::to_string(train.size()) + " subjects");
  grading::TrainingHistory hist;
  const auto ens = grading::train_ensemble(train, cfg.experiment.grading, derive_seed(cfg.seed, {0x6AD}), cfg.workers,
                                           &hist);
  grading::save_ensemble(ens, dir);
  nlohmann::json h = nlohmann::json::array();
  for (const auto& l : hist.locations) h.push_back({{"initial", l.initial_loss}, {"epochs", l.epoch_loss}});
  deepgrade::detail::write_text(dir / "history.json", h.dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_grade(const RunConfig& cfg, const std::string& subject) {
  const Paths paths{cfg};
  const auto cohort = load_cohort(paths);
  const auto ens = load_ensemble_or_fail(paths);
  std::vector<const Subject*> targets;
  for (const auto& s : cohort.subjects)
    if (subject.empty() || s.id == subject) targets.push_back(&s);
  if (targets.empty()) throw ValidationError("no subject '" + subject + "' in the manifest");
  const unsigned s = eval::structure_count(all_of(cohort));
  const auto dir = paths.grade_dir();
  const auto maps = grading::infer_grading_maps(ens, targets, cfg.workers);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto g = grading::aggregate_structure_scores(maps[i], targets[i]->labels, s, targets[i]->age);
    grading::export_grading_map(maps[i], g.scores, dir, targets[i]->id);
  }
  note("graded " + std::to_string(targets.size()) + " subject(s)");
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_train_classifiers(const RunConfig& cfg) {
  const Paths paths{cfg};
  const auto cohort = load_cohort(paths);
  const auto ens = load_ensemble_or_fail(paths);
  const auto& task = eval::find_task(cfg.experiment.task);
  const auto all = all_of(cohort);
  const unsigned s = eval::structure_count(all);
  note("grading " + std::to_string(all.size()) + " subjects");
  const auto feats = eval::extract_features(all, grading::infer_grading_maps(ens, all, cfg.workers), s);

  std::vector<eval::SubjectFeatures> f[3];
  std::vector<int> cls[3];
  std::vector<std::string> ids[3];
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (!task.includes(all[i]->diagnosis)) continue;
    const auto p = static_cast<int>(cohort.manifest.entries[i].split);
    f[p].push_back(feats[i]);
    cls[p].push_back(task.class_of.at(all[i]->diagnosis));
    ids[p].push_back(all[i]->id);
  }
  if (f[0].empty() || f[1].empty()) throw ValidationError("manifest needs train and val subjects for task " + task.id);
  note("training GCN and SVM for task " + task.id);
  const auto clf = eval::train_classifiers(f[0], cls[0], f[1], cls[1], task.classes(), cfg.experiment,
                                           derive_seed(cfg.seed, {0xC1A}), cfg.workers);
  const auto dir = paths.classifiers_dir();
  ensure_dir(dir);
  nn::write_checkpoint(clf.gcn.params().to_arrays(), dir / "gcn.gnn1");
  deepgrade::detail::write_text(dir / "svm.json", classify::to_json(clf.svm.model).dump(2) + "\n");
  nlohmann::json summary{{"task", task.id},
                         {"classes", task.class_names},
                         {"gcn", classify::to_json(cfg.experiment.gcn)},
                         {"gcn_best_epoch", clf.gcn_history.best_epoch},
                         {"svm_kernel", classify::to_string(clf.svm.kernel)},
                         {"svm_C", clf.svm.c},
                         {"svm_val_bacc", clf.svm.val_bacc},
                         {"alpha", clf.alpha.alpha},
                         {"fit_bacc", {{"fused", clf.alpha.bacc}, {"gcn", clf.alpha.bacc_gcn}, {"svm", clf.alpha.bacc_svm}}}};
  if (!f[2].empty()) {
    const auto pred = eval::predict(clf, f[2]);
    std::string csv = "subject_id,true";
    for (const auto& n : task.class_names) csv += ",p_" + n;
    csv += ",predicted\n";
    for (std::size_t i = 0; i < f[2].size(); ++i) {
      csv += ids[2][i] + "," + task.class_names[cls[2][i]];
      char buf[32];
      for (double p : pred.fused[i]) {
        std::snprintf(buf, sizeof buf, ",%.6f", p);
        csv += buf;
      }
      csv += "," + task.class_names[eval::argmax(pred.fused[i])] + "\n";
    }
    deepgrade::detail::write_text(dir / "test_predictions.csv", csv);
    bool all_classes = true;
    for (std::size_t c = 0; c < task.classes(); ++c)
      all_classes &= std::count(cls[2].begin(), cls[2].end(), static_cast<int>(c)) > 0;
    if (all_classes) summary["test"] = eval::to_json(eval::compute_metrics(pred.fused, cls[2], task.classes()));
  }
  deepgrade::detail::write_text(dir / "classifiers.json", summary.dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const Paths paths{cfg};
  const auto cohort = load_cohort(paths);
  const auto dir = paths.evaluate_dir();
  const auto report = eval::run_experiment(cohort.subjects, cfg.experiment, cfg.workers, note);
  ensure_dir(dir);
  deepgrade::detail::write_text(dir / "report.json", eval::to_json(report, cfg.experiment.top_n).dump(2) + "\n");
  deepgrade::detail::write_text(dir / "confusion.csv", eval::confusion_csv(report));
  char buf[160];
  std::snprintf(buf, sizeof buf, "mean test BACC fused %.3f, GCN %.3f, SVM %.3f",
                report.mean([](const auto& r) { return r.fused.bacc; }),
                report.mean([](const auto& r) { return r.gcn.bacc; }),
                report.mean([](const auto& r) { return r.svm.bacc; }));
  note(buf);
  std::cout << (dir / "report.json").string() << "\n";
  return 0;
}

int cmd_report_topn(const RunConfig& cfg, const std::string& group, unsigned n) {
  const Diagnosis d = parse_diagnosis(group);
  const Paths paths{cfg};
  const auto cohort = load_cohort(paths);
  const auto ens = load_ensemble_or_fail(paths);
  const unsigned s = eval::structure_count(all_of(cohort));
  if (n < 1 || n > s) throw ValidationError("n must lie in [1, " + std::to_string(s) + "]");
  // Test subjects when the manifest has them, otherwise every member of the group.
  std::vector<const Subject*> members;
  bool has_test = false;
  for (const auto& e : cohort.manifest.entries) has_test |= e.split == Split::Test;
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i)
    if (cohort.subjects[i].diagnosis == d && (!has_test || cohort.manifest.entries[i].split == Split::Test))
      members.push_back(&cohort.subjects[i]);
  if (members.empty()) throw ValidationError("group " + group + " has no subjects");
  std::vector<const LabelMap3D*> atlas_src;
  for (const auto* x : in_split(cohort, Split::Train))
    if (x->diagnosis == Diagnosis::CN) atlas_src.push_back(&x->labels);
  if (atlas_src.empty())
    for (const auto* x : all_of(cohort)) atlas_src.push_back(&x->labels);
  const auto atlas = eval::consensus_labels(atlas_src, s);

  const auto maps = grading::infer_grading_maps(ens, members, cfg.workers);
  const auto avg = grading::group_average_map(maps);
  const auto scores = grading::aggregate_structure_scores(avg, atlas, s, 0.0).scores;
  const auto ranked = grading::rank_structures(scores, n);
  const auto dir = paths.topn_dir();
  grading::export_grading_map(avg, scores, dir, "group_" + group);
  const auto out = dir / ("top" + std::to_string(n) + "_" + group + ".csv");
  deepgrade::detail::write_text(out, grading::ranked_csv(ranked));
  std::cout << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-based deep grading, structure-graph GCN and volume SVM on synthetic cohorts"};
  app.require_subcommand(0, 1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool print_default = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--workers", workers, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  app.add_flag("--print-default-config", print_default, "print the full default configuration and exit");

  auto* phantom = app.add_subcommand("phantom", "generate the synthetic cohort");
  auto* train_grading = app.add_subcommand("train-grading", "train the per-location U-Net ensemble");
  auto* grade = app.add_subcommand("grade", "grading map, structure CSV and slices per subject");
  std::string subject;
  grade->add_option("--subject", subject, "subject id (default: every subject)");
  auto* train_clf = app.add_subcommand("train-classifiers", "train GCN, SVM and the fusion weight");
  auto* evaluate = app.add_subcommand("evaluate", "repeated split/train/test experiment");
  auto* topn = app.add_subcommand("report-topn", "rank structures on a group-average grading map");
  std::string group = "AD";
  unsigned n = 10;
  topn->add_option("--group", group, "CN, AD or FTD");
  topn->add_option("--n", n, "number of structures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg;
    fs::path base;
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      try {
        j = nlohmann::json::parse(deepgrade::detail::read_text(config_path));
      } catch (const nlohmann::json::parse_error& ex) {
        throw ValidationError(config_path + ": " + ex.what());
      }
      base = fs::path(config_path).parent_path();
    }
    if (seed) j["seed"] = *seed;
    if (workers) j["workers"] = *workers;
    cfg = run_config_from_json(j, base);
    if (print_default || app.get_subcommands().empty()) {
      if (!print_default) {
        std::cerr << app.help();
        return 1;
      }
      std::cout << to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (*phantom) return cmd_phantom(cfg);
    if (*train_grading) return cmd_train_grading(cfg);
    if (*grade) return cmd_grade(cfg, subject);
    if (*train_clf) return cmd_train_classifiers(cfg);
    if (*evaluate) return cmd_evaluate(cfg);
    if (*topn) return cmd_report_topn(cfg, group, n);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CoverageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
