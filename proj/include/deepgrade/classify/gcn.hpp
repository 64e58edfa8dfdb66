#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/classify/oversample.hpp"
#include "deepgrade/error.hpp"
#include "deepgrade/eval/metrics.hpp"
#include "deepgrade/grading.hpp"
#include "deepgrade/neural/adam.hpp"
#include "deepgrade/neural/autograd.hpp"
#include "deepgrade/neural/module.hpp"
#include "deepgrade/rng.hpp"

namespace deepgrade::classify {

/// Maps age to [0, 1]: 40 years -> 0, 100 years -> 1, clamped.
inline double normalized_age(double age) { return std::clamp((age - 40.0) / 60.0, 0.0, 1.0); }

/// Complete graph over s structures; node j carries [score_j, normalized age].
struct StructureGraph {
  std::size_t nodes = 0;
  std::vector<double> features;  // nodes x 2, row-major

  static constexpr std::size_t kFeatures = 2;
};

inline StructureGraph build_graph(const grading::StructureGradingVector& g) {
  if (g.scores.size() < 2) throw ValidationError("a structure graph needs at least two nodes");
  StructureGraph out{g.scores.size(), {}};
  const double a = normalized_age(g.age);
  for (double s : g.scores) {
    out.features.push_back(s);
    out.features.push_back(a);
  }
  return out;
}

struct GCNConfig {
  unsigned layers = 3;
  unsigned width = 32;
  unsigned epochs = 300;
  double learning_rate = 1e-3;

  void validate() const {
    if (layers < 1) throw ValidationError("GCN needs at least one layer");
    if (width < 1) throw ValidationError("GCN width must be positive");
    if (epochs < 1) throw ValidationError("GCN epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("GCN learning rate must be positive");
  }
};

inline nlohmann::json to_json(const GCNConfig& c) {
  return {{"layers", c.layers}, {"width", c.width}, {"epochs", c.epochs}, {"learning_rate", c.learning_rate}};
}

inline GCNConfig gcn_config_from_json(const nlohmann::json& j) {
  GCNConfig c;
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.validate();
  return c;
}

/// Layer rule: H' = ReLU(H W_self + mean_nodes(H) W_neigh + b). Mean readout
/// over nodes, then a dense head to class logits.
template <class T>
class GCNModel {
 public:
  GCNModel(std::size_t in_features, std::size_t classes, const GCNConfig& config, std::uint64_t seed)
      : config_(config), in_features_(in_features), classes_(classes) {
    config_.validate();
    if (classes < 2) throw ValidationError("GCN needs at least two classes");
    Rng rng(seed);
    std::size_t in = in_features;
    for (unsigned l = 0; l < config_.layers; ++l) {
      const std::string p = "gcn" + std::to_string(l);
      params_.add_he_uniform(p + ".self", {in, config_.width}, in, rng);
      params_.add_he_uniform(p + ".neigh", {in, config_.width}, in, rng);
      params_.add_zeros(p + ".b", {config_.width});
      in = config_.width;
    }
    params_.add_he_uniform("head.w", {in, classes}, in, rng);
    params_.add_zeros("head.b", {classes});
  }

  /// x: [B, S, F] -> logits [B, classes].
  nn::Var<T> logits(const nn::Var<T>& x) const {
    if (x.rank() != 3 || x.dim(2) != in_features_)
      throw ShapeError("GCN input must be [B,S," + std::to_string(in_features_) + "], got " + nn::shape_str(x.shape()));
    const auto v = params_.vars();
    nn::Var<T> h = x;
    for (unsigned l = 0; l < config_.layers; ++l) {
      const auto& ws = v[3 * l];
      const auto& wn = v[3 * l + 1];
      const auto& b = v[3 * l + 2];
      h = nn::relu(nn::add_nodes(nn::dense(h, ws, b), nn::dense(nn::mean_nodes(h), wn)));
    }
    const std::size_t head = 3 * config_.layers;
    return nn::dense(nn::mean_nodes(h), v[head], v[head + 1]);
  }

  nn::Var<T> probabilities(const nn::Var<T>& x) const { return nn::softmax_rows(logits(x)); }

  const GCNConfig& config() const { return config_; }
  std::size_t classes() const { return classes_; }
  std::size_t in_features() const { return in_features_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }

 private:
  GCNConfig config_;
  std::size_t in_features_;
  std::size_t classes_;
  nn::ParameterSet<T> params_;
};

template <class T>
nn::Var<T> graphs_to_tensor(std::span<const StructureGraph* const> graphs) {
  if (graphs.empty()) throw ShapeError("no graphs to pack");
  const std::size_t S = graphs.front()->nodes;
  std::vector<T> data;
  data.reserve(graphs.size() * S * StructureGraph::kFeatures);
  for (const auto* g : graphs) {
    if (g->nodes != S) throw ShapeError("graphs in a batch must share the node count");
    for (double f : g->features) data.push_back(static_cast<T>(f));
  }
  return nn::Var<T>::constant({graphs.size(), S, StructureGraph::kFeatures}, std::move(data));
}

template <class T>
std::vector<std::vector<double>> gcn_predict(const GCNModel<T>& model, std::span<const StructureGraph> graphs) {
  if (graphs.empty()) return {};
  std::vector<const StructureGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  nn::NoGradGuard no_grad;
  const auto p = model.probabilities(graphs_to_tensor<T>(ptrs));
  const std::size_t K = model.classes();
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < graphs.size(); ++b) {
    std::vector<double> row(K);
    double sum = 0.0;
    for (std::size_t c = 0; c < K; ++c) sum += row[c] = static_cast<double>(p.value()[b * K + c]);
    for (auto& r : row) r /= sum;
    out.push_back(std::move(row));
  }
  return out;
}

template <class T>
std::vector<double> gcn_forward(const GCNModel<T>& model, const StructureGraph& graph) {
  return gcn_predict(model, std::span<const StructureGraph>(&graph, 1)).front();
}

struct GCNHistory {
  std::vector<double> train_loss;
  std::vector<double> val_bacc;
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;  // 1-based
};

/// Full-batch Adam on cross-entropy, re-oversampling the training set every
/// epoch. Returns the parameters with the best validation BACC (ties: lower
/// validation loss, then the earlier epoch).
inline GCNModel<float> train_gcn(std::span<const StructureGraph> train, std::span<const int> train_classes,
                                 std::span<const StructureGraph> val, std::span<const int> val_classes,
                                 std::size_t classes, const GCNConfig& config, std::uint64_t seed,
                                 GCNHistory* history = nullptr) {
  config.validate();
  if (train.size() != train_classes.size() || val.size() != val_classes.size())
    throw ValidationError("graph and class counts differ");
  if (train.empty() || val.empty()) throw ValidationError("GCN training and validation sets must be non-empty");
  std::vector<int> present(classes, 0);
  for (int c : train_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= classes) throw ValidationError("class index out of range");
    present[static_cast<std::size_t>(c)] = 1;
  }
  if (std::count(present.begin(), present.end(), 1) < 2)
    throw ValidationError("GCN training needs at least two classes");

  GCNModel<float> model(StructureGraph::kFeatures, classes, config, derive_seed(seed, {0x6C4}));
  GCNModel<float> best = model;
  double best_bacc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  nn::AdamState<float> opt;
  opt.config.lr = config.learning_rate;

  std::vector<const StructureGraph*> val_ptrs;
  for (const auto& g : val) val_ptrs.push_back(&g);
  const auto val_x = graphs_to_tensor<float>(val_ptrs);
  // Per-class validation BACC needs every class represented; fall back to
  // accuracy when validation lacks one.
  std::vector<int> val_present(classes, 0);
  for (int c : val_classes) val_present.at(static_cast<std::size_t>(c)) = 1;
  const bool val_has_all = std::count(val_present.begin(), val_present.end(), 1) == static_cast<long>(classes);

  GCNHistory h;
  for (unsigned e = 0; e < config.epochs; ++e) {
    const auto idx = oversample_indices(train_classes, derive_seed(seed, {0x05A, e}));
    std::vector<const StructureGraph*> batch;
    std::vector<int> cls;
    for (auto i : idx) {
      batch.push_back(&train[i]);
      cls.push_back(train_classes[i]);
    }
    auto loss = nn::cross_entropy_loss(model.logits(graphs_to_tensor<float>(batch)), std::span<const int>(cls));
    h.train_loss.push_back(loss.item());
    nn::backward(loss);
    nn::adam_step(model.params().vars(), opt);

    nn::NoGradGuard no_grad;
    const auto logits = model.logits(val_x);
    const double vloss = nn::cross_entropy_loss(logits, val_classes).item();
    std::vector<int> pred;
    for (std::size_t b = 0; b < val.size(); ++b) {
      const auto row = logits.value().subspan(b * classes, classes);
      pred.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    const auto cm = eval::ConfusionMatrix::from(val_classes, pred, classes);
    const double vb = val_has_all ? cm.balanced_accuracy() : cm.accuracy();
    h.val_bacc.push_back(vb);
    h.val_loss.push_back(vloss);
    if (vb > best_bacc || (vb == best_bacc && vloss < best_loss)) {
      best_bacc = vb;
      best_loss = vloss;
      best = model;
      h.best_epoch = e + 1;
    }
  }
  if (history) *history = std::move(h);
  return best;
}

}  // namespace deepgrade::classify
