#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/eval/metrics.hpp"

namespace deepgrade::eval {

/// alpha * p_gcn + (1 - alpha) * p_svm, renormalized only when the sum drifts
/// from 1 by more than 1e-9.
inline std::vector<double> fuse(std::span<const double> p_gcn, std::span<const double> p_svm, double alpha) {
  if (p_gcn.size() != p_svm.size()) throw ValidationError("fused probability vectors have different class counts");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("fusion weight must lie in [0, 1]");
  std::vector<double> p(p_gcn.size());
  double sum = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) sum += p[c] = alpha * p_gcn[c] + (1.0 - alpha) * p_svm[c];
  if (std::abs(sum - 1.0) > 1e-9)
    for (auto& v : p) v /= sum;
  return p;
}

inline std::vector<std::vector<double>> fuse_all(const std::vector<std::vector<double>>& p_gcn,
                                                 const std::vector<std::vector<double>>& p_svm, double alpha) {
  if (p_gcn.size() != p_svm.size()) throw ValidationError("fused prediction sets differ in size");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < p_gcn.size(); ++i) out.push_back(fuse(p_gcn[i], p_svm[i], alpha));
  return out;
}

/// Grid value i / 100 for i = 0..100.
inline double alpha_grid_value(int i) { return static_cast<double>(i) / 100.0; }

struct AlphaFit {
  double alpha = 0.0;
  double bacc = 0.0;      // fused BACC at alpha on the fit set
  double bacc_gcn = 0.0;  // alpha = 1
  double bacc_svm = 0.0;  // alpha = 0
};

/// Maximizes BACC of argmax-fused predictions over the 101-point grid; ties
/// keep the smaller alpha.
inline AlphaFit fit_alpha(const std::vector<std::vector<double>>& p_gcn, const std::vector<std::vector<double>>& p_svm,
                          std::span<const int> truth, std::size_t classes) {
  if (truth.empty()) throw ValidationError("fit_alpha needs at least one labelled pair");
  if (p_gcn.size() != truth.size() || p_svm.size() != truth.size())
    throw ValidationError("fit_alpha inputs differ in size");
  AlphaFit fit;
  fit.bacc = -1.0;
  for (int i = 0; i <= 100; ++i) {
    const double a = alpha_grid_value(i);
    const double b = balanced_accuracy(truth, argmax_rows(fuse_all(p_gcn, p_svm, a)), classes);
    if (i == 0) fit.bacc_svm = b;
    if (i == 100) fit.bacc_gcn = b;
    if (b > fit.bacc) {
      fit.bacc = b;
      fit.alpha = a;
    }
  }
  return fit;
}

}  // namespace deepgrade::eval
