#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/neural/autograd.hpp"

namespace deepgrade::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update. Parameters without a gradient buffer are
/// treated as having zero gradient. Gradients are cleared afterwards.
template <class T>
void adam_step(std::span<Var<T>> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw ShapeError("adam_step: moment shape mismatch");
    auto value = p.mutable_value();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] = static_cast<T>(value[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
    p.zero_grad();
  }
}

}  // namespace deepgrade::nn
