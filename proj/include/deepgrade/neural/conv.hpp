#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "deepgrade/neural/autograd.hpp"

namespace deepgrade::nn {

namespace detail {

struct Conv3dGeometry {
  std::size_t N, Ci, Co, D, H, W, K0, K1, K2;
  std::size_t plane() const { return D * H * W; }
};

// Valid output range along one axis for tap offset d: o in [lo, hi) keeps o + d inside [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::ptrdiff_t d) {
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -d);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), static_cast<std::ptrdiff_t>(n) - d);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

/// Visits every (tap, output row) pair of a same-padded 3D correlation and
/// hands the kernel the aligned input/output row offsets and x range.
template <class Fn>
void for_each_tap_row(const Conv3dGeometry& g, Fn&& fn) {
  const auto p0 = static_cast<std::ptrdiff_t>(g.K0 / 2), p1 = static_cast<std::ptrdiff_t>(g.K1 / 2),
             p2 = static_cast<std::ptrdiff_t>(g.K2 / 2);
  for (std::size_t k0 = 0; k0 < g.K0; ++k0) {
    const auto d0 = static_cast<std::ptrdiff_t>(k0) - p0;
    const auto [z0, z1] = valid_range(g.D, d0);
    for (std::size_t k1 = 0; k1 < g.K1; ++k1) {
      const auto d1 = static_cast<std::ptrdiff_t>(k1) - p1;
      const auto [y0, y1] = valid_range(g.H, d1);
      for (std::size_t k2 = 0; k2 < g.K2; ++k2) {
        const auto d2 = static_cast<std::ptrdiff_t>(k2) - p2;
        const auto [x0, x1] = valid_range(g.W, d2);
        const std::size_t tap = (k0 * g.K1 + k1) * g.K2 + k2;
        for (std::size_t z = z0; z < z1; ++z)
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t out_row = (z * g.H + y) * g.W;
            const std::size_t in_row =
                ((z + d0) * g.H + (y + d1)) * g.W;  // add d2 per element
            fn(tap, out_row, in_row, d2, x0, x1);
          }
      }
    }
  }
}

}  // namespace detail

namespace detail {

/// Dot product with fixed lane-wise partial sums so the loop vectorizes
/// without reassociation flags; the summation order is still deterministic.
template <class T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t L = 16;
  T acc[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t j = 0; j < L; ++j) acc[j] += a[i + j] * b[i + j];
  T s = 0;
  for (std::size_t j = 0; j < L; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T lane_sum(const T* a, std::size_t n) {
  constexpr std::size_t L = 16;
  T acc[L] = {};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t j = 0; j < L; ++j) acc[j] += a[i + j];
  T s = 0;
  for (std::size_t j = 0; j < L; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i];
  return s;
}

/// Lowers one sample [Ci, D, H, W] to columns [Ci * taps, D * H * W]; padded
/// positions stay zero.
template <class T>
void im2col(const Conv3dGeometry& g, const T* in, T* col) {
  const std::size_t taps = g.K0 * g.K1 * g.K2, P = g.plane();
  std::fill(col, col + g.Ci * taps * P, T(0));
  for (std::size_t ci = 0; ci < g.Ci; ++ci) {
    const T* src = in + ci * P;
    for_each_tap_row(g, [&](std::size_t tap, std::size_t orow, std::size_t irow, std::ptrdiff_t d2, std::size_t x0,
                            std::size_t x1) {
      T* dst = col + (ci * taps + tap) * P + orow;
      for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] = src[irow + xx + d2];
    });
  }
}

/// Scatter-adds columns back onto a sample gradient [Ci, D, H, W].
template <class T>
void col2im_add(const Conv3dGeometry& g, const T* col, T* grad_in) {
  const std::size_t taps = g.K0 * g.K1 * g.K2, P = g.plane();
  for (std::size_t ci = 0; ci < g.Ci; ++ci) {
    T* dst = grad_in + ci * P;
    for_each_tap_row(g, [&](std::size_t tap, std::size_t orow, std::size_t irow, std::ptrdiff_t d2, std::size_t x0,
                            std::size_t x1) {
      const T* src = col + (ci * taps + tap) * P + orow;
      for (std::size_t xx = x0; xx < x1; ++xx) dst[irow + xx + d2] += src[xx];
    });
  }
}

}  // namespace detail

/// Same-padded, stride-1 3D convolution (cross-correlation).
/// x: [N, Ci, D, H, W], w: [Co, Ci, K0, K1, K2] with odd K, b: [Co].
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.rank() != 5 || w.rank() != 5 || b.rank() != 1 || w.dim(1) != x.dim(1) || b.dim(0) != w.dim(0))
    throw ShapeError("conv3d: input " + shape_str(x.shape()) + ", weights " + shape_str(w.shape()) + ", bias " +
                     shape_str(b.shape()));
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0 || w.dim(4) % 2 == 0) throw ShapeError("conv3d: kernel dims must be odd");
  const detail::Conv3dGeometry g{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3), x.dim(4), w.dim(2), w.dim(3), w.dim(4)};
  const std::size_t R = g.Ci * g.K0 * g.K1 * g.K2, P = g.plane();
  const bool one_by_one = g.K0 * g.K1 * g.K2 == 1;
  std::vector<T> cols(one_by_one ? 0 : g.N * R * P);
  std::vector<T> y(g.N * g.Co * P);
  const T* wv = w.value().data();
  for (std::size_t n = 0; n < g.N; ++n) {
    const T* col = x.value().data() + n * g.Ci * P;
    if (!one_by_one) {
      detail::im2col(g, col, cols.data() + n * R * P);
      col = cols.data() + n * R * P;
    }
    T* out_n = y.data() + n * g.Co * P;
    for (std::size_t co = 0; co < g.Co; ++co) std::fill(out_n + co * P, out_n + (co + 1) * P, b.value()[co]);
    for (std::size_t r = 0; r < R; ++r) {
      const T* c = col + r * P;
      for (std::size_t co = 0; co < g.Co; ++co) {
        const T wt = wv[co * R + r];
        T* out = out_n + co * P;
        for (std::size_t p = 0; p < P; ++p) out[p] += wt * c[p];
      }
    }
  }
  Shape ys{g.N, g.Co, g.D, g.H, g.W};
  return make_result<T>(std::move(ys), std::move(y), {x, w, b}, [g, R, P, cols = std::move(cols)](Node<T>& self) {
    const T* wv = self.inputs[1]->value.data();
    const T* gy = self.grad.data();
    auto* gx = detail::grad_of(self, 0);
    auto* gw = detail::grad_of(self, 1);
    auto* gb = detail::grad_of(self, 2);
    const bool one_by_one = cols.empty();
    std::vector<T> gcol(gx && !one_by_one ? R * P : 0);
    for (std::size_t n = 0; n < g.N; ++n) {
      const T* col = one_by_one ? self.inputs[0]->value.data() + n * g.Ci * P : cols.data() + n * R * P;
      const T* go = gy + n * g.Co * P;
      if (gb)
        for (std::size_t co = 0; co < g.Co; ++co) (*gb)[co] += detail::lane_sum(go + co * P, P);
      if (gw)
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t co = 0; co < g.Co; ++co) (*gw)[co * R + r] += detail::lane_dot(go + co * P, col + r * P, P);
      if (gx) {
        T* target = one_by_one ? gx->data() + n * g.Ci * P : gcol.data();
        if (!one_by_one) std::fill(gcol.begin(), gcol.end(), T(0));
        for (std::size_t r = 0; r < R; ++r) {
          T* gc = target + r * P;
          for (std::size_t co = 0; co < g.Co; ++co) {
            const T wt = wv[co * R + r];
            const T* o = go + co * P;
            for (std::size_t p = 0; p < P; ++p) gc[p] += wt * o[p];
          }
        }
        if (!one_by_one) detail::col2im_add(g, gcol.data(), gx->data() + n * g.Ci * P);
      }
    }
  });
}

/// 2x2x2 max pooling over [N, C, D, H, W]; spatial dims must be even.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  if (x.rank() != 5 || x.dim(2) % 2 || x.dim(3) % 2 || x.dim(4) % 2)
    throw ShapeError("maxpool2 needs [N,C,D,H,W] with even spatial dims, got " + shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t d = D / 2, h = H / 2, w = W / 2;
  std::vector<T> y(NC * d * h * w);
  std::vector<std::size_t> arg(y.size());
  const T* xv = x.value().data();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx) {
          std::size_t best = c * D * H * W + ((2 * z) * H + 2 * yy) * W + 2 * xx;
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t i = c * D * H * W + ((2 * z + dz) * H + 2 * yy + dy) * W + 2 * xx + dx;
                if (xv[i] > xv[best]) best = i;
              }
          const std::size_t o = ((c * d + z) * h + yy) * w + xx;
          y[o] = xv[best];
          arg[o] = best;
        }
  Shape ys{x.dim(0), x.dim(1), d, h, w};
  return make_result<T>(std::move(ys), std::move(y), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    for (std::size_t o = 0; o < arg.size(); ++o) (*gx)[arg[o]] += self.grad[o];
  });
}

/// Nearest-neighbour x2 upsampling over [N, C, D, H, W].
template <class T>
Var<T> upsample_nn2(const Var<T>& x) {
  if (x.rank() != 5) throw ShapeError("upsample_nn2 needs [N,C,D,H,W], got " + shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t D = 2 * d, H = 2 * h, W = 2 * w;
  std::vector<T> y(NC * D * H * W);
  const T* xv = x.value().data();
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx)
          y[((c * D + z) * H + yy) * W + xx] = xv[((c * d + z / 2) * h + yy / 2) * w + xx / 2];
  Shape ys{x.dim(0), x.dim(1), D, H, W};
  return make_result<T>(std::move(ys), std::move(y), {x}, [NC, d, h, w](Node<T>& self) {
    auto* gx = detail::grad_of(self, 0);
    const std::size_t D = 2 * d, H = 2 * h, W = 2 * w;
    for (std::size_t c = 0; c < NC; ++c)
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t yy = 0; yy < H; ++yy)
          for (std::size_t xx = 0; xx < W; ++xx)
            (*gx)[((c * d + z / 2) * h + yy / 2) * w + xx / 2] += self.grad[((c * D + z) * H + yy) * W + xx];
  });
}

/// Concatenates [N, Ca, ...] and [N, Cb, ...] along the channel axis.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t P = a.size() / (N * Ca);
  Shape ys = a.shape();
  ys[1] = Ca + Cb;
  std::vector<T> y;
  y.reserve(a.size() + b.size());
  for (std::size_t n = 0; n < N; ++n) {
    y.insert(y.end(), a.value().begin() + n * Ca * P, a.value().begin() + (n + 1) * Ca * P);
    y.insert(y.end(), b.value().begin() + n * Cb * P, b.value().begin() + (n + 1) * Cb * P);
  }
  return make_result<T>(std::move(ys), std::move(y), {a, b}, [N, Ca, Cb, P](Node<T>& self) {
    auto* ga = detail::grad_of(self, 0);
    auto* gb = detail::grad_of(self, 1);
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * (Ca + Cb) * P;
      if (ga)
        for (std::size_t i = 0; i < Ca * P; ++i) (*ga)[n * Ca * P + i] += g[i];
      if (gb)
        for (std::size_t i = 0; i < Cb * P; ++i) (*gb)[n * Cb * P + i] += g[Ca * P + i];
    }
  });
}

}  // namespace deepgrade::nn
