#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deepgrade/error.hpp"

namespace deepgrade::eval {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    if (classes < 2) throw ValidationError("a confusion matrix needs at least two classes");
  }

  static ConfusionMatrix from(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
    if (truth.size() != predicted.size()) throw ValidationError("truth and prediction counts differ");
    ConfusionMatrix m(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) m.add(truth[i], predicted[i]);
    return m;
  }

  void add(int truth, int predicted, std::size_t n = 1) {
    if (truth < 0 || predicted < 0 || static_cast<std::size_t>(truth) >= k_ || static_cast<std::size_t>(predicted) >= k_)
      throw ValidationError("class index out of range");
    counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(predicted)] += n;
  }

  std::size_t classes() const { return k_; }
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  std::size_t row_total(std::size_t c) const {
    return std::accumulate(counts_.begin() + c * k_, counts_.begin() + (c + 1) * k_, std::size_t{0});
  }
  std::size_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

  double accuracy() const {
    const auto n = total();
    if (n == 0) throw ValidationError("accuracy of an empty confusion matrix");
    std::size_t diag = 0;
    for (std::size_t c = 0; c < k_; ++c) diag += at(c, c);
    return static_cast<double>(diag) / static_cast<double>(n);
  }

  double sensitivity(std::size_t c) const {
    const auto row = row_total(c);
    if (row == 0) throw ValidationError("class " + std::to_string(c) + " has no true samples");
    return static_cast<double>(at(c, c)) / static_cast<double>(row);
  }

  double balanced_accuracy() const {
    double s = 0.0;
    for (std::size_t c = 0; c < k_; ++c) s += sensitivity(c);
    return s / static_cast<double>(k_);
  }

  std::string csv(std::span<const std::string> names) const {
    std::string out = "true\\predicted";
    for (std::size_t c = 0; c < k_; ++c) out += "," + names[c];
    out += "\n";
    for (std::size_t r = 0; r < k_; ++r) {
      out += names[r];
      for (std::size_t c = 0; c < k_; ++c) out += "," + std::to_string(at(r, c));
      out += "\n";
    }
    return out;
  }

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

/// Index of the largest entry; ties go to the lowest index.
inline int argmax(std::span<const double> p) {
  if (p.empty()) throw ValidationError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return static_cast<int>(best);
}

inline std::vector<int> argmax_rows(const std::vector<std::vector<double>>& probs) {
  std::vector<int> out;
  out.reserve(probs.size());
  for (const auto& p : probs) out.push_back(argmax(p));
  return out;
}

inline double balanced_accuracy(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  return ConfusionMatrix::from(truth, predicted, classes).balanced_accuracy();
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ordered correctly,
/// ties counted as one half. Computed by ranking, O(n log n).
inline double auc_binary(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ValidationError("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;  // ranks doubled to stay integral
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double twice_rank = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (positive[order[t]]) {
        pos_rank_sum += twice_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("AUC needs both positive and negative samples");
  const double u = pos_rank_sum / 2.0 - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Unweighted mean over classes of the one-vs-rest AUC using that class's
/// probability as the score.
inline double auc_macro_ovr(const std::vector<std::vector<double>>& probs, std::span<const int> truth,
                            std::size_t classes) {
  if (probs.size() != truth.size()) throw ValidationError("probabilities and labels differ in length");
  double sum = 0.0;
  std::vector<double> score(probs.size());
  std::vector<int> pos(probs.size());
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i].size() != classes) throw ValidationError("probability vector has the wrong class count");
      score[i] = probs[i][c];
      pos[i] = truth[i] == static_cast<int>(c);
    }
    sum += auc_binary(score, pos);
  }
  return sum / static_cast<double>(classes);
}

/// Binary tasks use the AUC of the second class's probability; larger tasks
/// use the macro one-vs-rest average.
inline double auc(const std::vector<std::vector<double>>& probs, std::span<const int> truth, std::size_t classes) {
  if (classes == 2) {
    std::vector<double> score;
    std::vector<int> pos;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      score.push_back(probs[i].at(1));
      pos.push_back(truth[i] == 1);
    }
    return auc_binary(score, pos);
  }
  return auc_macro_ovr(probs, truth, classes);
}

}  // namespace deepgrade::eval
