// Central finite-difference checks for every differentiable op in 64-bit mode.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "deepgrade/classify/gcn.hpp"
#include "deepgrade/neural/autograd.hpp"
#include "deepgrade/neural/conv.hpp"
#include "deepgrade/neural/unet.hpp"
#include "test_util.hpp"

using namespace deepgrade;
using nn::Shape;
using V = nn::Var<double>;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-5;
constexpr int kShapes = 20;

using Op = std::function<V(const std::vector<V>&)>;

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) per input, with the
/// loss projected onto a fixed random direction.
std::vector<double> gradient_errors(std::vector<V> inputs, const Op& op, Rng& rng) {
  const V probe = op(inputs);
  const auto dir = testutil::random_vector(rng, probe.size());
  auto loss_of = [&](const std::vector<V>& in) {
    nn::NoGradGuard guard;
    return nn::dot_const<double>(op(in), dir).item();
  };
  for (auto& v : inputs) v.zero_grad();
  nn::backward(nn::dot_const<double>(op(inputs), dir));

  std::vector<double> errors;
  for (auto& v : inputs) {
    if (!v.requires_grad()) continue;
    std::vector<double> analytic(v.size(), 0.0);
    if (v.has_grad()) std::copy(v.grad().begin(), v.grad().end(), analytic.begin());
    double diff = 0.0, na = 0.0, nn_ = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v.value()[i];
      v.mutable_value()[i] = orig + kStep;
      const double up = loss_of(inputs);
      v.mutable_value()[i] = orig - kStep;
      const double down = loss_of(inputs);
      v.mutable_value()[i] = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn_ += numeric * numeric;
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn_));
    errors.push_back(scale > 0.0 ? std::sqrt(diff) / scale : std::sqrt(diff));
  }
  return errors;
}

V param(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  return V::parameter(s, testutil::random_vector(rng, nn::numel(s), lo, hi));
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
V param_off_zero(Rng& rng, Shape s) {
  auto v = testutil::random_vector(rng, nn::numel(s), 0.05, 1.0);
  for (auto& x : v)
    if (rng.uniform() < 0.5) x = -x;
  return V::parameter(s, v);
}

/// Distinct values spaced at least 1e-3 apart, randomly permuted.
V param_distinct(Rng& rng, Shape s) {
  std::vector<double> v(nn::numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 0.5;
  rng.shuffle(std::span<double>(v));
  return V::parameter(s, v);
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

void check_op(const char* name, std::uint64_t seed, const std::function<std::vector<V>(Rng&)>& make, const Op& op) {
  Rng rng(seed);
  for (int s = 0; s < kShapes; ++s) {
    auto inputs = make(rng);
    for (double e : gradient_errors(inputs, op, rng)) EXPECT_LT(e, kTolerance) << name << " shape #" << s;
  }
}

}  // namespace

TEST(Gradient, Relu) {
  check_op("relu", 1, [](Rng& r) { return std::vector<V>{param_off_zero(r, {dim(r, 1, 4), dim(r, 1, 9)})}; },
           [](const std::vector<V>& in) { return nn::relu(in[0]); });
}

TEST(Gradient, Tanh) {
  check_op("tanh", 2, [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 4), dim(r, 1, 9)}, -2, 2)}; },
           [](const std::vector<V>& in) { return nn::tanh(in[0]); });
}

TEST(Gradient, Add) {
  check_op("add", 3,
           [](Rng& r) {
             Shape s{dim(r, 1, 5), dim(r, 1, 7)};
             return std::vector<V>{param(r, s), param(r, s)};
           },
           [](const std::vector<V>& in) { return nn::add(in[0], in[1]); });
}

TEST(Gradient, Scale) {
  check_op("scale", 4, [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 30)})}; },
           [](const std::vector<V>& in) { return nn::scale(in[0], -1.7); });
}

TEST(Gradient, DenseWithBias) {
  check_op("dense", 5,
           [](Rng& r) {
             const std::size_t b = dim(r, 1, 4), s = dim(r, 1, 3), i = dim(r, 1, 6), o = dim(r, 1, 5);
             return std::vector<V>{param(r, {b, s, i}), param(r, {i, o}), param(r, {o})};
           },
           [](const std::vector<V>& in) { return nn::dense(in[0], in[1], in[2]); });
}

TEST(Gradient, DenseWithoutBias) {
  check_op("dense_nobias", 6,
           [](Rng& r) {
             const std::size_t b = dim(r, 1, 5), i = dim(r, 1, 6), o = dim(r, 1, 5);
             return std::vector<V>{param(r, {b, i}), param(r, {i, o})};
           },
           [](const std::vector<V>& in) { return nn::dense(in[0], in[1]); });
}

TEST(Gradient, SoftmaxRows) {
  check_op("softmax_rows", 7, [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 5), dim(r, 2, 6)}, -3, 3)}; },
           [](const std::vector<V>& in) { return nn::softmax_rows(in[0]); });
}

TEST(Gradient, MeanNodes) {
  check_op("mean_nodes", 8,
           [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 3), dim(r, 1, 6), dim(r, 1, 4)})}; },
           [](const std::vector<V>& in) { return nn::mean_nodes(in[0]); });
}

TEST(Gradient, AddNodes) {
  check_op("add_nodes", 9,
           [](Rng& r) {
             const std::size_t b = dim(r, 1, 3), s = dim(r, 1, 6), f = dim(r, 1, 4);
             return std::vector<V>{param(r, {b, s, f}), param(r, {b, f})};
           },
           [](const std::vector<V>& in) { return nn::add_nodes(in[0], in[1]); });
}

TEST(Gradient, MaskedMse) {
  Rng rng(10);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t n = dim(rng, 2, 40);
    const auto target = testutil::random_vector(rng, n);
    std::vector<double> mask(n);
    for (auto& m : mask) m = rng.uniform() < 0.7 ? 1.0 : 0.0;
    mask[0] = 1.0;
    auto err = gradient_errors({param(rng, {n})},
                               [&](const std::vector<V>& in) {
                                 return nn::masked_mse_loss<double>(in[0], target, mask);
                               },
                               rng);
    EXPECT_LT(err.at(0), kTolerance) << "shape #" << s;
  }
}

TEST(Gradient, CrossEntropy) {
  Rng rng(11);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t b = dim(rng, 1, 6), k = dim(rng, 2, 5);
    std::vector<int> cls(b);
    for (auto& c : cls) c = static_cast<int>(rng.index(k));
    auto err = gradient_errors({param(rng, {b, k}, -3, 3)},
                               [&](const std::vector<V>& in) { return nn::cross_entropy_loss<double>(in[0], cls); },
                               rng);
    EXPECT_LT(err.at(0), kTolerance) << "shape #" << s;
  }
}

TEST(Gradient, Conv3d) {
  check_op("conv3d", 12,
           [](Rng& r) {
             const std::size_t n = dim(r, 1, 2), ci = dim(r, 1, 3), co = dim(r, 1, 3);
             const std::size_t k0 = 1 + 2 * r.index(2), k1 = 1 + 2 * r.index(2), k2 = 1 + 2 * r.index(2);
             Shape xs{n, ci, dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 5)};
             return std::vector<V>{param(r, xs), param(r, {co, ci, k0, k1, k2}), param(r, {co})};
           },
           [](const std::vector<V>& in) { return nn::conv3d(in[0], in[1], in[2]); });
}

TEST(Gradient, Maxpool2) {
  check_op("maxpool2", 13,
           [](Rng& r) {
             return std::vector<V>{
                 param_distinct(r, {dim(r, 1, 2), dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2), 2 * dim(r, 1, 3)})};
           },
           [](const std::vector<V>& in) { return nn::maxpool2(in[0]); });
}

TEST(Gradient, UpsampleNn2) {
  check_op("upsample_nn2", 14,
           [](Rng& r) {
             return std::vector<V>{param(r, {dim(r, 1, 2), dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)})};
           },
           [](const std::vector<V>& in) { return nn::upsample_nn2(in[0]); });
}

TEST(Gradient, ConcatChannels) {
  check_op("concat_channels", 15,
           [](Rng& r) {
             const std::size_t n = dim(r, 1, 3), d = dim(r, 1, 3), h = dim(r, 1, 3), w = dim(r, 1, 3);
             return std::vector<V>{param(r, {n, dim(r, 1, 3), d, h, w}), param(r, {n, dim(r, 1, 3), d, h, w})};
           },
           [](const std::vector<V>& in) { return nn::concat_channels(in[0], in[1]); });
}

TEST(Gradient, DotConst) {
  Rng rng(16);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t n = dim(rng, 1, 30);
    const auto w = testutil::random_vector(rng, n);
    auto err = gradient_errors({param(rng, {n})},
                               [&](const std::vector<V>& in) { return nn::dot_const<double>(in[0], w); }, rng);
    EXPECT_LT(err.at(0), kTolerance);
  }
}

TEST(Gradient, GcnModelEndToEnd) {
  Rng rng(17);
  for (int s = 0; s < kShapes; ++s) {
    classify::GCNConfig cfg;
    cfg.layers = 1 + static_cast<unsigned>(rng.index(3));
    cfg.width = 2 + static_cast<unsigned>(rng.index(5));
    const std::size_t classes = 2 + rng.index(2);
    classify::GCNModel<double> model(2, classes, cfg, 100 + s);
    const std::size_t B = dim(rng, 1, 3), S = dim(rng, 2, 5);
    const auto x = V::constant({B, S, 2}, testutil::random_vector(rng, B * S * 2));
    std::vector<int> cls(B);
    for (auto& c : cls) c = static_cast<int>(rng.index(classes));
    std::vector<V> params(model.params().vars().begin(), model.params().vars().end());
    // Nudge biases off the ReLU kinks.
    for (auto& p : params)
      for (auto& v : p.mutable_value()) v += (v >= 0 ? 0.05 : -0.05);
    auto err = gradient_errors(params,
                               [&](const std::vector<V>&) { return nn::cross_entropy_loss<double>(model.logits(x), cls); },
                               rng);
    for (double e : err) EXPECT_LT(e, kTolerance) << "shape #" << s;
  }
}

TEST(Gradient, UNetEndToEnd) {
  Rng rng(18);
  for (int s = 0; s < kShapes; ++s) {
    nn::UNetConfig cfg;
    cfg.levels = 1 + static_cast<unsigned>(rng.index(2));
    cfg.base_channels = 1 + static_cast<unsigned>(rng.index(2));
    nn::UNet<double> net(cfg, 200 + s);
    const std::size_t N = dim(rng, 1, 2);
    const Shape xs{N, 1, 2 * dim(rng, 1, 2), 2 * dim(rng, 1, 2), 2 * dim(rng, 1, 2)};
    const auto x = V::constant(xs, testutil::random_vector(rng, nn::numel(xs)));
    const auto target = testutil::random_vector(rng, nn::numel(xs));
    std::vector<V> params(net.params().vars().begin(), net.params().vars().end());
    auto err = gradient_errors(params,
                               [&](const std::vector<V>&) {
                                 return nn::masked_mse_loss<double>(net.forward(x), target);
                               },
                               rng);
    for (double e : err) EXPECT_LT(e, kTolerance) << "shape #" << s;
  }
}
