#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/error.hpp"
#include "deepgrade/eval/metrics.hpp"
#include "deepgrade/parallel.hpp"

namespace deepgrade::classify {

using Matrix = std::vector<std::vector<double>>;

enum class KernelType { Linear = 0, Polynomial = 1, Gaussian = 2 };

inline constexpr KernelType kKernelOrder[] = {KernelType::Linear, KernelType::Polynomial, KernelType::Gaussian};

inline std::string to_string(KernelType k) {
  switch (k) {
    case KernelType::Linear: return "linear";
    case KernelType::Polynomial: return "polynomial";
    case KernelType::Gaussian: return "gaussian";
  }
  return "?";
}

inline KernelType parse_kernel(const std::string& s) {
  for (auto k : kKernelOrder)
    if (to_string(k) == s) return k;
  throw ValidationError("unknown kernel '" + s + "'");
}

/// linear: x.y; polynomial: (gamma x.y + coef0)^degree; gaussian: exp(-gamma |x-y|^2).
struct Kernel {
  KernelType type = KernelType::Linear;
  double gamma = 1.0;
  int degree = 3;
  double coef0 = 1.0;

  double operator()(std::span<const double> a, std::span<const double> b) const {
    if (type == KernelType::Gaussian) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
      return std::exp(-gamma * d2);
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    if (type == KernelType::Linear) return dot;
    return std::pow(gamma * dot + coef0, degree);
  }
};

inline nlohmann::json to_json(const Kernel& k) {
  return {{"type", to_string(k.type)}, {"gamma", k.gamma}, {"degree", k.degree}, {"coef0", k.coef0}};
}

inline Kernel kernel_from_json(const nlohmann::json& j) {
  return {parse_kernel(j.at("type").get<std::string>()), j.at("gamma").get<double>(), j.at("degree").get<int>(),
          j.at("coef0").get<double>()};
}

/// Per-dimension mean and population std from training rows. Constant
/// dimensions keep std 1 so they map to 0.
struct Standardizer {
  std::vector<double> mean, stddev;

  static Standardizer fit(const Matrix& x) {
    if (x.empty()) throw ValidationError("cannot standardize an empty feature set");
    const std::size_t d = x.front().size();
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (const auto& row : x) {
      if (row.size() != d) throw ValidationError("feature rows differ in length");
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += row[j];
    }
    for (auto& m : s.mean) m /= static_cast<double>(x.size());
    for (const auto& row : x)
      for (std::size_t j = 0; j < d; ++j) s.stddev[j] += (row[j] - s.mean[j]) * (row[j] - s.mean[j]);
    for (auto& v : s.stddev) {
      v = std::sqrt(v / static_cast<double>(x.size()));
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  std::vector<double> apply(std::span<const double> row) const {
    if (row.size() != mean.size()) throw ValidationError("feature row has the wrong dimension");
    std::vector<double> out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) out[j] = (row[j] - mean[j]) / stddev[j];
    return out;
  }

  Matrix apply(const Matrix& x) const {
    Matrix out;
    out.reserve(x.size());
    for (const auto& r : x) out.push_back(apply(r));
    return out;
  }
};

/// 1 / (d * var(x)) with var over every entry of the matrix.
inline double scale_gamma(const Matrix& x) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& r : x)
    for (double v : r) {
      sum += v;
      sq += v * v;
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  const double d = static_cast<double>(x.front().size());
  return var > 0.0 ? 1.0 / (d * var) : 1.0;
}

struct Rational {
  std::uint64_t num = 0, den = 1;
  friend bool operator==(const Rational&, const Rational&) = default;
};

/// Exact N / (K * count), reduced.
inline Rational balanced_weight_exact(std::uint64_t total, std::uint64_t classes, std::uint64_t count) {
  if (count == 0 || classes == 0) throw ValidationError("balanced weight undefined for an empty class");
  const std::uint64_t den = classes * count;
  const std::uint64_t g = std::gcd(total, den);
  return {total / g, den / g};
}

/// Weight per class index: N / (K * N_c) with K the number of classes.
inline std::vector<double> balanced_weights(std::span<const int> classes, std::size_t k) {
  std::vector<std::size_t> counts(k, 0);
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= k) throw ValidationError("class index out of range");
    ++counts[static_cast<std::size_t>(c)];
  }
  std::vector<double> w(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) throw ValidationError("balanced weight undefined for an empty class");
    w[c] = static_cast<double>(classes.size()) / (static_cast<double>(k) * static_cast<double>(counts[c]));
  }
  return w;
}

struct SmoOptions {
  double tolerance = 1e-3;
  std::size_t max_iterations = 100000;
};

struct SmoResult {
  std::vector<double> alpha;
  double bias = 0.0;
  std::size_t iterations = 0;
  double kkt_gap = 0.0;
  std::vector<double> objective;  // dual objective after each iteration when traced
};

/// Dual objective sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij.
inline double dual_objective(const Matrix& K, std::span<const int> y, std::span<const double> alpha) {
  double lin = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    lin += alpha[i];
    if (alpha[i] == 0.0) continue;
    for (std::size_t j = 0; j < alpha.size(); ++j) quad += alpha[i] * alpha[j] * y[i] * y[j] * K[i][j];
  }
  return lin - 0.5 * quad;
}

/// SMO with second-order working-set selection on a precomputed kernel
/// matrix. Labels are +1/-1; upper bounds are per sample.
inline SmoResult solve_smo(const Matrix& K, std::span<const int> y, std::span<const double> upper,
                           const SmoOptions& opt = {}, bool trace = false) {
  const std::size_t n = y.size();
  if (n < 2 || K.size() != n || upper.size() != n) throw ValidationError("SMO needs matching kernel, labels and bounds");
  bool has_pos = false, has_neg = false;
  for (int v : y) {
    if (v != 1 && v != -1) throw ValidationError("SMO labels must be +1 or -1");
    (v > 0 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ValidationError("SMO needs both labels present");
  for (double c : upper)
    if (!(c > 0.0)) throw ValidationError("SMO upper bounds must be positive");

  constexpr double tau = 1e-12;
  std::vector<double> alpha(n, 0.0), grad(n, -1.0);  // gradient of 1/2 a'Qa - e'a
  auto Q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * K[i][j]; };
  auto in_up = [&](std::size_t t) { return (y[t] > 0 && alpha[t] < upper[t]) || (y[t] < 0 && alpha[t] > 0.0); };
  auto in_low = [&](std::size_t t) { return (y[t] > 0 && alpha[t] > 0.0) || (y[t] < 0 && alpha[t] < upper[t]); };

  SmoResult res;
  double obj = 0.0;
  for (;;) {
    double gmax = -std::numeric_limits<double>::infinity(), gmin = std::numeric_limits<double>::infinity();
    std::size_t i = n;
    for (std::size_t t = 0; t < n; ++t)
      if (in_up(t) && -y[t] * grad[t] >= gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    std::size_t j = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double v = -y[t] * grad[t];
      gmin = std::min(gmin, v);
      if (i == n) continue;
      const double b = gmax - v;
      if (b > 0.0) {
        double a = K[i][i] + K[t][t] - 2.0 * K[i][t];
        if (a <= 0.0) a = tau;
        const double score = -(b * b) / a;
        if (score <= best) {
          best = score;
          j = t;
        }
      }
    }
    res.kkt_gap = gmax - gmin;
    if (i == n || j == n || res.kkt_gap < opt.tolerance) break;
    if (res.iterations >= opt.max_iterations)
      throw ConvergenceError("SMO did not converge within " + std::to_string(opt.max_iterations) + " iterations",
                             res.kkt_gap);
    ++res.iterations;

    const double ci = upper[i], cj = upper[j];
    const double old_ai = alpha[i], old_aj = alpha[j];
    if (y[i] != y[j]) {
      double quad = K[i][i] + K[j][j] + 2.0 * Q(i, j);
      if (quad <= 0.0) quad = tau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = -diff;
      }
      if (diff > ci - cj) {
        if (alpha[i] > ci) {
          alpha[i] = ci;
          alpha[j] = ci - diff;
        }
      } else if (alpha[j] > cj) {
        alpha[j] = cj;
        alpha[i] = cj + diff;
      }
    } else {
      double quad = K[i][i] + K[j][j] - 2.0 * Q(i, j) * y[i] * y[j];
      if (quad <= 0.0) quad = tau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > ci) {
        if (alpha[i] > ci) {
          alpha[i] = ci;
          alpha[j] = sum - ci;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > cj) {
        if (alpha[j] > cj) {
          alpha[j] = cj;
          alpha[i] = sum - cj;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double dai = alpha[i] - old_ai, daj = alpha[j] - old_aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += Q(t, i) * dai + Q(t, j) * daj;
    if (trace) {
      // f = 1/2 a'Qa - e'a = 1/2 sum a_t (g_t - 1) ; dual objective is -f.
      obj = 0.0;
      for (std::size_t t = 0; t < n; ++t) obj -= 0.5 * alpha[t] * (grad[t] - 1.0);
      res.objective.push_back(obj);
    }
  }

  // Bias from free vectors, else the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity(), sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= upper[t]) {
      if (y[t] < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0.0) {
      if (y[t] > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : (ub + lb) / 2.0;
  res.bias = -rho;
  res.alpha = std::move(alpha);
  return res;
}

/// Sigmoid calibration p = 1 / (1 + exp(A f + B)).
struct Platt {
  double a = -1.0, b = 0.0;

  double operator()(double f) const {
    const double z = a * f + b;
    return z >= 0.0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
  }
};

/// Newton fit with backtracking and Platt's smoothed targets.
inline Platt fit_platt(std::span<const double> f, std::span<const int> positive) {
  if (f.size() != positive.size() || f.empty()) throw ValidationError("Platt fit needs matching non-empty inputs");
  double prior1 = 0.0, prior0 = 0.0;
  for (int p : positive) (p ? prior1 : prior0) += 1.0;
  const double hi = (prior1 + 1.0) / (prior1 + 2.0), lo = 1.0 / (prior0 + 2.0);
  std::vector<double> t(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) t[i] = positive[i] ? hi : lo;

  const int max_iter = 100;
  const double min_step = 1e-10, sigma = 1e-12, eps = 1e-5;
  double A = 0.0, B = std::log((prior0 + 1.0) / (prior1 + 1.0));
  auto objective = [&](double a, double b) {
    double v = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double z = f[i] * a + b;
      v += z >= 0.0 ? t[i] * z + std::log1p(std::exp(-z)) : (t[i] - 1.0) * z + std::log1p(std::exp(z));
    }
    return v;
  };
  double fval = objective(A, B);
  for (int it = 0; it < max_iter; ++it) {
    double h11 = sigma, h22 = sigma, h21 = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double z = f[i] * A + B;
      double p, q;
      if (z >= 0.0) {
        p = std::exp(-z) / (1.0 + std::exp(-z));
        q = 1.0 / (1.0 + std::exp(-z));
      } else {
        p = 1.0 / (1.0 + std::exp(z));
        q = std::exp(z) / (1.0 + std::exp(z));
      }
      const double d2 = p * q;
      h11 += f[i] * f[i] * d2;
      h22 += d2;
      h21 += f[i] * d2;
      const double d1 = t[i] - p;
      g1 += f[i] * d1;
      g2 += d1;
    }
    if (std::abs(g1) < eps && std::abs(g2) < eps) break;
    const double det = h11 * h22 - h21 * h21;
    const double dA = -(h22 * g1 - h21 * g2) / det;
    const double dB = -(-h21 * g1 + h11 * g2) / det;
    const double gd = g1 * dA + g2 * dB;
    double step = 1.0;
    while (step >= min_step) {
      const double na = A + step * dA, nb = B + step * dB;
      const double nf = objective(na, nb);
      if (nf < fval + 1e-4 * step * gd) {
        A = na;
        B = nb;
        fval = nf;
        break;
      }
      step /= 2.0;
    }
    if (step < min_step) break;
  }
  return {A, B};
}

/// One binary machine: decision f(x) = sum coef_i K(sv_i, x) + bias with
/// coef_i = y_i alpha_i over the support vectors.
struct BinaryMachine {
  Kernel kernel;
  double c = 1.0;
  Matrix support;
  std::vector<double> coef;
  double bias = 0.0;
  Platt platt;

  double decision(std::span<const double> x) const {
    double s = bias;
    for (std::size_t i = 0; i < support.size(); ++i) s += coef[i] * kernel(support[i], x);
    return s;
  }
};

inline Matrix kernel_matrix(const Matrix& x, const Kernel& k) {
  const std::size_t n = x.size();
  Matrix K(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) K[i][j] = K[j][i] = k(x[i], x[j]);
  return K;
}

/// Balanced weights N/(2 N_label) for the +1/-1 groups of a binary problem.
inline std::pair<double, double> binary_balanced_weights(std::span<const int> y) {
  std::vector<int> cls;
  for (int v : y) cls.push_back(v > 0 ? 1 : 0);
  const auto w = balanced_weights(cls, 2);
  return {w[1], w[0]};
}

/// Trains on standardized rows x with labels +1/-1 and per-class weights
/// (weight_pos, weight_neg); bound for sample i is C times its class weight.
inline BinaryMachine train_svm_binary(const Matrix& x, std::span<const int> y, const Kernel& kernel, double C,
                                      std::pair<double, double> weights, const SmoOptions& opt = {},
                                      const Matrix* precomputed = nullptr, SmoResult* detail = nullptr) {
  if (x.size() != y.size()) throw ValidationError("feature and label counts differ");
  const Matrix K = precomputed ? Matrix{} : kernel_matrix(x, kernel);
  const Matrix& km = precomputed ? *precomputed : K;
  std::vector<double> upper(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) upper[i] = C * (y[i] > 0 ? weights.first : weights.second);
  auto res = solve_smo(km, y, upper, opt, detail != nullptr);
  BinaryMachine m;
  m.kernel = kernel;
  m.c = C;
  m.bias = res.bias;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (res.alpha[i] > 0.0) {
      m.support.push_back(x[i]);
      m.coef.push_back(y[i] * res.alpha[i]);
    }
  if (detail) *detail = std::move(res);
  return m;
}

/// One-vs-rest multi-class SVM with per-machine Platt calibration.
struct SVMModel {
  std::size_t classes = 0;
  Standardizer standardizer;
  std::vector<BinaryMachine> machines;  // one per class

  std::vector<double> decision_values(std::span<const double> raw) const {
    const auto x = standardizer.apply(raw);
    std::vector<double> f;
    for (const auto& m : machines) f.push_back(m.decision(x));
    return f;
  }
};

inline std::vector<double> platt_normalize(const SVMModel& model, std::span<const double> decisions) {
  std::vector<double> p(model.classes);
  double sum = 0.0;
  for (std::size_t c = 0; c < model.classes; ++c) sum += p[c] = model.machines[c].platt(decisions[c]);
  if (!(sum > 0.0)) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(model.classes));
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline std::vector<double> svm_predict_proba(const SVMModel& model, std::span<const double> features) {
  return platt_normalize(model, model.decision_values(features));
}

/// C grid: `points` values 10^(lo + (hi - lo) i / (points - 1)), endpoints exact.
inline std::vector<double> c_grid(std::size_t points = 500, int lo_exp = -5, int hi_exp = 5) {
  if (points < 2) throw ValidationError("C grid needs at least two points");
  std::vector<double> g(points);
  const double span = static_cast<double>(hi_exp - lo_exp);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = std::pow(10.0, lo_exp + span * static_cast<double>(i) / static_cast<double>(points - 1));
  g.front() = std::pow(10.0, lo_exp);
  g.back() = std::pow(10.0, hi_exp);
  return g;
}

struct SVMSearchConfig {
  std::size_t c_points = 500;
  int c_lo_exp = -5;
  int c_hi_exp = 5;
  int poly_degree = 3;
  SmoOptions smo;

  void validate() const {
    if (c_points < 2) throw ValidationError("SVM C grid needs at least two points");
    if (c_lo_exp >= c_hi_exp) throw ValidationError("SVM C grid range is empty");
    if (poly_degree < 1) throw ValidationError("polynomial degree must be >= 1");
    if (!(smo.tolerance > 0.0) || smo.max_iterations < 1) throw ValidationError("invalid SMO options");
  }
};

inline nlohmann::json to_json(const SVMSearchConfig& c) {
  return {{"c_points", c.c_points},
          {"c_lo_exp", c.c_lo_exp},
          {"c_hi_exp", c.c_hi_exp},
          {"poly_degree", c.poly_degree},
          {"smo_tolerance", c.smo.tolerance},
          {"smo_max_iterations", c.smo.max_iterations}};
}

inline SVMSearchConfig svm_config_from_json(const nlohmann::json& j) {
  SVMSearchConfig c;
  c.c_points = j.value("c_points", c.c_points);
  c.c_lo_exp = j.value("c_lo_exp", c.c_lo_exp);
  c.c_hi_exp = j.value("c_hi_exp", c.c_hi_exp);
  c.poly_degree = j.value("poly_degree", c.poly_degree);
  c.smo.tolerance = j.value("smo_tolerance", c.smo.tolerance);
  c.smo.max_iterations = j.value("smo_max_iterations", c.smo.max_iterations);
  c.validate();
  return c;
}

struct GridCell {
  KernelType kernel;
  double c;
  std::optional<double> val_bacc;  // empty when a machine failed to converge
  double residual = 0.0;
};

struct GridSearchResult {
  SVMModel model;
  KernelType kernel = KernelType::Linear;
  double c = 0.0;
  double val_bacc = 0.0;
  std::vector<GridCell> cells;
};

namespace detail {

inline std::vector<int> one_vs_rest(std::span<const int> classes, int c) {
  std::vector<int> y;
  for (int v : classes) y.push_back(v == c ? 1 : -1);
  return y;
}

/// Trains all OvR machines for one (kernel, C) and calibrates on validation.
inline SVMModel fit_cell(const Matrix& x, std::span<const int> cls, std::size_t k, const Kernel& kernel, double C,
                         const Matrix& K, const Standardizer& st, const Matrix& xv, std::span<const int> val_cls,
                         const SmoOptions& opt) {
  SVMModel m;
  m.classes = k;
  m.standardizer = st;
  for (std::size_t c = 0; c < k; ++c) {
    const auto y = one_vs_rest(cls, static_cast<int>(c));
    auto mach = train_svm_binary(x, y, kernel, C, binary_balanced_weights(y), opt, &K);
    std::vector<double> f;
    std::vector<int> pos;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      f.push_back(mach.decision(xv[i]));
      pos.push_back(val_cls[i] == static_cast<int>(c));
    }
    mach.platt = fit_platt(f, pos);
    m.machines.push_back(std::move(mach));
  }
  return m;
}

}  // namespace detail

/// Selects (kernel, C) by validation BACC of argmax calibrated probabilities;
/// ties go to the smaller C, then linear < polynomial < gaussian. Cells whose
/// solver fails to converge are recorded and skipped.
inline GridSearchResult grid_search_svm(const Matrix& train_x, std::span<const int> train_cls, const Matrix& val_x,
                                        std::span<const int> val_cls, std::size_t k, const SVMSearchConfig& config = {},
                                        int workers = 1) {
  config.validate();
  if (train_x.empty() || val_x.empty()) throw ValidationError("SVM training and validation sets must be non-empty");
  if (train_x.size() != train_cls.size() || val_x.size() != val_cls.size())
    throw ValidationError("feature and label counts differ");
  const auto st = Standardizer::fit(train_x);
  const Matrix xs = st.apply(train_x), xv = st.apply(val_x);
  const double gamma = scale_gamma(xs);
  std::vector<Kernel> kernels;
  for (auto t : kKernelOrder) kernels.push_back({t, t == KernelType::Linear ? 1.0 : gamma, config.poly_degree, 1.0});
  std::vector<Matrix> kms;
  for (const auto& kn : kernels) kms.push_back(kernel_matrix(xs, kn));
  const auto cs = c_grid(config.c_points, config.c_lo_exp, config.c_hi_exp);

  std::vector<GridCell> cells(cs.size() * kernels.size());
  parallel_for(cells.size(), workers, [&](std::size_t idx) {
    const std::size_t ci = idx / kernels.size(), ki = idx % kernels.size();
    GridCell cell{kernels[ki].type, cs[ci], std::nullopt, 0.0};
    try {
      const auto m = detail::fit_cell(xs, train_cls, k, kernels[ki], cs[ci], kms[ki], st, xv, val_cls, config.smo);
      std::vector<int> pred;
      for (const auto& row : xv) {
        std::vector<double> f;
        for (const auto& mach : m.machines) f.push_back(mach.decision(row));
        pred.push_back(eval::argmax(platt_normalize(m, f)));
      }
      const auto cm = eval::ConfusionMatrix::from(val_cls, pred, k);
      cell.val_bacc = cm.balanced_accuracy();
    } catch (const ConvergenceError& ex) {
      cell.residual = ex.residual();
    }
    cells[idx] = cell;
  });

  std::optional<std::size_t> best;
  for (std::size_t idx = 0; idx < cells.size(); ++idx)  // C ascending, kernel order inner
    if (cells[idx].val_bacc && (!best || *cells[idx].val_bacc > *cells[*best].val_bacc)) best = idx;
  if (!best) throw ConvergenceError("no SVM grid cell converged", cells.front().residual);
  const std::size_t ci = *best / kernels.size(), ki = *best % kernels.size();
  GridSearchResult r;
  r.model = detail::fit_cell(xs, train_cls, k, kernels[ki], cs[ci], kms[ki], st, xv, val_cls, config.smo);
  r.kernel = kernels[ki].type;
  r.c = cs[ci];
  r.val_bacc = *cells[*best].val_bacc;
  r.cells = std::move(cells);
  return r;
}

inline nlohmann::json to_json(const SVMModel& m) {
  nlohmann::json machines = nlohmann::json::array();
  for (const auto& b : m.machines)
    machines.push_back({{"kernel", to_json(b.kernel)},
                        {"C", b.c},
                        {"support_vectors", b.support},
                        {"dual_coef", b.coef},
                        {"bias", b.bias},
                        {"platt_A", b.platt.a},
                        {"platt_B", b.platt.b}});
  return {{"classes", m.classes},
          {"standardize_mean", m.standardizer.mean},
          {"standardize_std", m.standardizer.stddev},
          {"machines", machines}};
}

inline SVMModel svm_model_from_json(const nlohmann::json& j) {
  SVMModel m;
  m.classes = j.at("classes").get<std::size_t>();
  m.standardizer.mean = j.at("standardize_mean").get<std::vector<double>>();
  m.standardizer.stddev = j.at("standardize_std").get<std::vector<double>>();
  for (const auto& o : j.at("machines")) {
    BinaryMachine b;
    b.kernel = kernel_from_json(o.at("kernel"));
    b.c = o.at("C").get<double>();
    b.support = o.at("support_vectors").get<Matrix>();
    b.coef = o.at("dual_coef").get<std::vector<double>>();
    b.bias = o.at("bias").get<double>();
    b.platt = {o.at("platt_A").get<double>(), o.at("platt_B").get<double>()};
    m.machines.push_back(std::move(b));
  }
  if (m.machines.size() != m.classes) throw FormatError("SVM model machine count does not match class count");
  return m;
}

}  // namespace deepgrade::classify
