#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "deepgrade/error.hpp"

namespace deepgrade::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a value in the computation graph.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var make(Shape shape, std::vector<T> value, bool requires_grad) {
    if (value.size() != numel(shape))
      throw ShapeError("value length " + std::to_string(value.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Shape shape, std::vector<T> value) { return make(std::move(shape), std::move(value), false); }
  static Var parameter(Shape shape, std::vector<T> value) { return make(std::move(shape), std::move(value), true); }

  explicit operator bool() const { return static_cast<bool>(node_); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  void zero_grad() { node_->grad.clear(); }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op output. The backward closure is kept only when recording
/// and at least one input needs a gradient.
template <class T, class Fn>
Var<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, Fn&& backward) {
  auto out = Var<T>::make(std::move(shape), std::move(value), false);
  if (!detail::grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto* n = out.node();
  n->requires_grad = true;
  for (const auto& in : inputs) n->inputs.push_back(in.shared());
  n->backward = std::forward<Fn>(backward);
  return out;
}

/// Reverse-mode sweep from a scalar. Gradients accumulate into every node
/// that requires them; callers zero parameter gradients between steps.
template <class T>
void backward(const Var<T>& loss) {
  if (loss.size() != 1) throw ValidationError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace detail {

template <class T>
std::vector<T>* grad_of(Node<T>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> relu(const Var<T>& x) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(y), {x}, [](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T(0)) (*gx)[i] += self.grad[i];
  });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x.value()[i]);
  return make_result<T>(x.shape(), std::move(y), {x}, [](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.value.size(); ++i)
      (*gx)[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  std::vector<T> y(x.value().begin(), x.value().end());
  for (auto& v : y) v *= s;
  return make_result<T>(x.shape(), std::move(y), {x}, [s](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += s * self.grad[i];
  });
}

/// sum_i x_i * w_i for a constant weight vector; used to reduce to a scalar.
template <class T>
Var<T> dot_const(const Var<T>& x, std::span<const T> w) {
  if (w.size() != x.size()) throw ShapeError("dot_const: weight length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
  std::vector<T> wc(w.begin(), w.end());
  return make_result<T>({1}, {s}, {x}, [wc = std::move(wc)](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < wc.size(); ++i) (*gx)[i] += self.grad[0] * wc[i];
  });
}

// ---------------------------------------------------------------------------
// Dense and row-wise ops
// ---------------------------------------------------------------------------

/// y[..., o] = sum_i x[..., i] * W[i, o] + b[o]. Pass an empty b for no bias.
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& W, const Var<T>& b = {}) {
  if (W.rank() != 2 || x.rank() < 1 || x.shape().back() != W.dim(0))
    throw ShapeError("dense: input " + shape_str(x.shape()) + " vs weights " + shape_str(W.shape()));
  const std::size_t in = W.dim(0), out = W.dim(1), rows = x.size() / in;
  if (b && (b.rank() != 1 || b.dim(0) != out)) throw ShapeError("dense: bias " + shape_str(b.shape()));
  Shape ys = x.shape();
  ys.back() = out;
  std::vector<T> y(rows * out, T(0));
  const T* xv = x.value().data();
  const T* wv = W.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = &y[r * out];
    if (b) std::copy(b.value().begin(), b.value().end(), yr);
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xv[r * in + i];
      const T* wr = wv + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
  auto back = [in, out, rows](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    const auto& g = self.grad;
    if (auto* gx = detail::grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < in; ++i) {
          T s = 0;
          for (std::size_t o = 0; o < out; ++o) s += g[r * out + o] * wv[i * out + o];
          (*gx)[r * in + i] += s;
        }
    if (auto* gw = detail::grad_of(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < in; ++i) {
          const T xi = xv[r * in + i];
          for (std::size_t o = 0; o < out; ++o) (*gw)[i * out + o] += xi * g[r * out + o];
        }
    if (self.inputs.size() > 2)
      if (auto* gb = detail::grad_of(self, 2))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out; ++o) (*gb)[o] += g[r * out + o];
  };
  if (b) return make_result<T>(std::move(ys), std::move(y), {x, W, b}, back);
  return make_result<T>(std::move(ys), std::move(y), {x, W}, back);
}

/// Softmax along the last axis.
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax_rows on a scalar");
  const std::size_t k = x.shape().back(), rows = x.size() / k;
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T s = 0;
    for (std::size_t c = 0; c < k; ++c) s += (y[r * k + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < k; ++c) y[r * k + c] /= s;
  }
  return make_result<T>(x.shape(), std::move(y), {x}, [k, rows](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = self.value.data() + r * k;
      const T* g = self.grad.data() + r * k;
      T dotp = 0;
      for (std::size_t c = 0; c < k; ++c) dotp += p[c] * g[c];
      for (std::size_t c = 0; c < k; ++c) (*gx)[r * k + c] += p[c] * (g[c] - dotp);
    }
  });
}

/// [B, S, F] -> [B, F], mean over the S axis.
template <class T>
Var<T> mean_nodes(const Var<T>& h) {
  if (h.rank() != 3) throw ShapeError("mean_nodes expects [B,S,F], got " + shape_str(h.shape()));
  const std::size_t B = h.dim(0), S = h.dim(1), F = h.dim(2);
  std::vector<T> y(B * F, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t f = 0; f < F; ++f) y[b * F + f] += h.value()[(b * S + s) * F + f];
  for (auto& v : y) v /= static_cast<T>(S);
  return make_result<T>({B, F}, std::move(y), {h}, [B, S, F](Node<T>& self) {
    auto* gh = detail::grad_of(self, 0);
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t f = 0; f < F; ++f) (*gh)[(b * S + s) * F + f] += inv * self.grad[b * F + f];
  });
}

/// h[B, S, F] + g[B, F] broadcast over S.
template <class T>
Var<T> add_nodes(const Var<T>& h, const Var<T>& g) {
  if (h.rank() != 3 || g.rank() != 2 || g.dim(0) != h.dim(0) || g.dim(1) != h.dim(2))
    throw ShapeError("add_nodes: " + shape_str(h.shape()) + " + " + shape_str(g.shape()));
  const std::size_t B = h.dim(0), S = h.dim(1), F = h.dim(2);
  std::vector<T> y(h.value().begin(), h.value().end());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t f = 0; f < F; ++f) y[(b * S + s) * F + f] += g.value()[b * F + f];
  return make_result<T>(h.shape(), std::move(y), {h, g}, [B, S, F](Node<T>& self) {
    if (auto* gh = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gh)[i] += self.grad[i];
    if (auto* gg = detail::grad_of(self, 1))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t f = 0; f < F; ++f) (*gg)[b * F + f] += self.grad[(b * S + s) * F + f];
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// sum(m * (pred - target)^2) / sum(m). With a 0/1 mask this is the mean over
/// the selected voxels.
template <class T>
Var<T> masked_mse_loss(const Var<T>& pred, std::span<const T> target, std::span<const T> mask) {
  if (target.size() != pred.size() || mask.size() != pred.size())
    throw ShapeError("masked_mse_loss: pred, target and mask sizes differ");
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    acc += mask[i] * d * d;
    wsum += mask[i];
  }
  if (!(wsum > 0.0)) throw DegenerateInputError("masked_mse_loss: mask selects no voxels");
  std::vector<T> t(target.begin(), target.end()), m(mask.begin(), mask.end());
  const T inv = static_cast<T>(1.0 / wsum);
  return make_result<T>({1}, {static_cast<T>(acc / wsum)}, {pred},
                        [t = std::move(t), m = std::move(m), inv](Node<T>& self) {
                          auto* gp = detail::grad_of(self, 0);
                          const auto& p = self.inputs[0]->value;
                          const T g = self.grad[0] * T(2) * inv;
                          for (std::size_t i = 0; i < p.size(); ++i) (*gp)[i] += g * m[i] * (p[i] - t[i]);
                        });
}

template <class T>
Var<T> masked_mse_loss(const Var<T>& pred, std::span<const T> target) {
  std::vector<T> ones(pred.size(), T(1));
  return masked_mse_loss(pred, target, std::span<const T>(ones));
}

/// Mean negative log-softmax probability of the true class. logits: [B, K].
template <class T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const int> classes) {
  if (logits.rank() != 2 || logits.dim(0) != classes.size())
    throw ShapeError("cross_entropy_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(classes.size()) + " labels");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (int c : classes)
    if (c < 0 || static_cast<std::size_t>(c) >= K)
      throw ValidationError("class index " + std::to_string(c) + " out of range for " + std::to_string(K) + " classes");
  std::vector<T> probs(B * K);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* x = logits.value().data() + b * K;
    const T mx = *std::max_element(x, x + K);
    T s = 0;
    for (std::size_t c = 0; c < K; ++c) s += std::exp(x[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < K; ++c) probs[b * K + c] = std::exp(x[c] - lse);
    loss += lse - x[classes[b]];
  }
  loss /= static_cast<T>(B);
  std::vector<int> cls(classes.begin(), classes.end());
  return make_result<T>({1}, {loss}, {logits},
                        [probs = std::move(probs), cls = std::move(cls), B, K](Node<T>& self) {
                          auto* gx = detail::grad_of(self, 0);
                          const T g = self.grad[0] / static_cast<T>(B);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < K; ++c)
                              (*gx)[b * K + c] +=
                                  g * (probs[b * K + c] - (static_cast<int>(c) == cls[b] ? T(1) : T(0)));
                        });
}

}  // namespace deepgrade::nn
