#pragma once

// Tensor kernels shared by the eager API and the autodiff tape. Each
// differentiable op has a forward kernel and, where the tape needs one, a
// vector-Jacobian kernel named *_backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "mlground/error.hpp"
#include "mlground/tensor.hpp"

namespace mlground {

// Denominator floor for every norm-style division.
inline constexpr double kNormEpsilon = 1e-8;

namespace kernel {

// c[m x n] += op(a) * op(b). op(a) is m x k and op(b) is k x n; a transposed
// operand is read as its stored (k x m) or (n x k) layout.
template <typename Scalar>
void gemm_accumulate(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                     std::size_t k, std::span<const Scalar> a,
                     std::span<const Scalar> b, std::span<Scalar> c) {
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == Scalar(0)) continue;
      if (!trans_b) {
        const Scalar* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

struct MatmulDims {
  std::size_t m, n, k;
  Shape out_shape;
};

template <typename Scalar>
MatmulDims matmul_dims(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                       bool trans_a, bool trans_b) {
  auto fail = [&] {
    return ShapeError(detail::concat(
        "matmul shape mismatch: ", detail::shape_str(a.shape()),
        trans_a ? "^T" : "", " x ", detail::shape_str(b.shape()),
        trans_b ? "^T" : ""));
  };
  if (a.rank() < 2 || b.rank() != 2) throw fail();
  if (trans_a && a.rank() != 2) throw fail();
  MatmulDims d;
  const std::size_t a_rows = a.size() / a.shape().back();
  const std::size_t a_cols = a.shape().back();
  d.m = trans_a ? a_cols : a_rows;
  d.k = trans_a ? a_rows : a_cols;
  const std::size_t bk = trans_b ? b.dim(1) : b.dim(0);
  d.n = trans_b ? b.dim(0) : b.dim(1);
  if (bk != d.k) throw fail();
  if (trans_a) {
    d.out_shape = {d.m, d.n};
  } else {
    d.out_shape.assign(a.shape().begin(), a.shape().end() - 1);
    d.out_shape.push_back(d.n);
  }
  return d;
}

}  // namespace kernel

// Matrix product op(a) x op(b). Leading extents of an untransposed `a` are
// treated as batch rows: a[..., m, k] x b[k, n] -> [..., m, n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                      bool trans_a = false, bool trans_b = false) {
  auto d = kernel::matmul_dims(a, b, trans_a, trans_b);
  Tensor<Scalar> out(d.out_shape);
  kernel::gemm_accumulate<Scalar>(trans_a, trans_b, d.m, d.n, d.k, a.data(),
                                  b.data(), out.data());
  return out;
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& x, Scalar alpha) {
  if (!(alpha >= Scalar(0) && alpha < Scalar(1))) {
    throw ValueError(detail::concat("leaky_relu alpha must lie in [0,1), got ", alpha));
  }
  Tensor<Scalar> out = x;
  for (auto& v : out.storage()) v = v > Scalar(0) ? v : alpha * v;
  return out;
}

// Subgradient is 0 exactly at x == 0.
template <typename Scalar>
Scalar leaky_relu_slope(Scalar x, Scalar alpha) {
  if (x > Scalar(0)) return Scalar(1);
  if (x < Scalar(0)) return alpha;
  return Scalar(0);
}

// Divides every last-axis vector by max(||v||, eps). Zero vectors stay zero.
template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x;
  const std::size_t d = x.shape().back();
  auto data = out.data();
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    Scalar* v = data.data() + r * d;
    Scalar sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += v[i] * v[i];
    const Scalar denom = std::max(std::sqrt(sq), Scalar(kNormEpsilon));
    for (std::size_t i = 0; i < d; ++i) v[i] /= denom;
  }
  return out;
}

namespace kernel {

template <typename Scalar>
void l2_normalize_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                           const Tensor<Scalar>& gy, Tensor<Scalar>& gx) {
  const std::size_t d = x.shape().back();
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    const std::size_t o = r * d;
    Scalar sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += x[o + i] * x[o + i];
    const Scalar norm = std::sqrt(sq);
    if (norm > Scalar(kNormEpsilon)) {
      Scalar proj = 0;
      for (std::size_t i = 0; i < d; ++i) proj += y[o + i] * gy[o + i];
      for (std::size_t i = 0; i < d; ++i) {
        gx[o + i] += (gy[o + i] - y[o + i] * proj) / norm;
      }
    } else {
      for (std::size_t i = 0; i < d; ++i) gx[o + i] += gy[o + i] / Scalar(kNormEpsilon);
    }
  }
}

// One bilinear tap along a single axis: source index pair and weights.
struct ResizeTap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

// Half-pixel-center sampling: src = (i + 0.5) * in / out - 0.5, clamped to
// [0, in - 1].
inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<ResizeTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[i] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace kernel

// Resizes an h x w x c (or h x w) grid to out_h x out_w.
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, std::size_t out_h,
                               std::size_t out_w) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError(detail::concat("bilinear_resize expects h x w [x c], got ",
                                    detail::shape_str(x.shape())));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize output extent 0");
  const std::size_t h = x.dim(0), w = x.dim(1);
  const std::size_t c = x.rank() == 3 ? x.dim(2) : 1;
  const auto ty = kernel::resize_taps(h, out_h);
  const auto tx = kernel::resize_taps(w, out_w);
  Shape shape{out_h, out_w};
  if (x.rank() == 3) shape.push_back(c);
  Tensor<Scalar> out(shape);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t rows[2] = {ty[i].lo, ty[i].hi};
      const double wr[2] = {ty[i].w_lo, ty[i].w_hi};
      const std::size_t cols[2] = {tx[j].lo, tx[j].hi};
      const double wc[2] = {tx[j].w_lo, tx[j].w_hi};
      Scalar* dst = out.data().data() + (i * out_w + j) * c;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const auto wt = static_cast<Scalar>(wr[a] * wc[b]);
          if (wt == Scalar(0)) continue;
          const Scalar* src = x.data().data() + (rows[a] * w + cols[b]) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
        }
      }
    }
  }
  return out;
}

namespace kernel {

template <typename Scalar>
void bilinear_resize_backward(const Tensor<Scalar>& gy, Tensor<Scalar>& gx) {
  const std::size_t h = gx.dim(0), w = gx.dim(1);
  const std::size_t c = gx.rank() == 3 ? gx.dim(2) : 1;
  const std::size_t out_h = gy.dim(0), out_w = gy.dim(1);
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t rows[2] = {ty[i].lo, ty[i].hi};
      const double wr[2] = {ty[i].w_lo, ty[i].w_hi};
      const std::size_t cols[2] = {tx[j].lo, tx[j].hi};
      const double wc[2] = {tx[j].w_lo, tx[j].w_hi};
      const Scalar* src = gy.data().data() + (i * out_w + j) * c;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const auto wt = static_cast<Scalar>(wr[a] * wc[b]);
          if (wt == Scalar(0)) continue;
          Scalar* dst = gx.data().data() + (rows[a] * w + cols[b]) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
        }
      }
    }
  }
}

}  // namespace kernel

// (1/gamma) * log(sum_t exp(gamma * r_t)), evaluated with max subtraction.
template <typename Scalar>
Scalar logsumexp_scaled(std::span<const Scalar> r, Scalar gamma) {
  if (r.empty()) throw ValueError("logsumexp_scaled of an empty vector");
  if (!(gamma > Scalar(0))) {
    throw ValueError(detail::concat("logsumexp_scaled gamma must be > 0, got ", gamma));
  }
  const Scalar peak = *std::max_element(r.begin(), r.end());
  Scalar acc = 0;
  for (Scalar v : r) acc += std::exp(gamma * (v - peak));
  return peak + std::log(acc) / gamma;
}

// softmax(gamma * r), the gradient of logsumexp_scaled.
template <typename Scalar>
std::vector<Scalar> softmax_scaled(std::span<const Scalar> r, Scalar gamma) {
  const Scalar peak = *std::max_element(r.begin(), r.end());
  std::vector<Scalar> p(r.size());
  Scalar acc = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    p[i] = std::exp(gamma * (r[i] - peak));
    acc += p[i];
  }
  for (auto& v : p) v /= acc;
  return p;
}

// Index of the largest element; ties resolve to the lowest index.
template <typename Scalar>
std::size_t argmax(std::span<const Scalar> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Per-row argmax over the last axis.
template <typename Scalar>
std::vector<std::size_t> argmax_last(const Tensor<Scalar>& x) {
  const std::size_t d = x.shape().back();
  std::vector<std::size_t> out(x.size() / d);
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = argmax(x.data().subspan(r * d, d));
  }
  return out;
}

// Softmax along axis 0 of a 2-D tensor (each column sums to one).
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows expects a matrix");
  const std::size_t n = x.dim(0), t = x.dim(1);
  Tensor<Scalar> out(x.shape());
  for (std::size_t j = 0; j < t; ++j) {
    Scalar peak = x.at(0, j);
    for (std::size_t i = 1; i < n; ++i) peak = std::max(peak, x.at(i, j));
    Scalar acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out.at(i, j) = std::exp(x.at(i, j) - peak);
      acc += out.at(i, j);
    }
    for (std::size_t i = 0; i < n; ++i) out.at(i, j) /= acc;
  }
  return out;
}

}  // namespace mlground
