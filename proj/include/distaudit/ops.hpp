#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distaudit/kernels.hpp"
#include "distaudit/tensor.hpp"

// Differentiable operations over TensorT. Every op allocates a fresh output,
// checks shapes up front, verifies the result is finite, and (when a tape is
// given and some input requires grad) records a single backward closure with
// a closed-form gradient. Passing tape == nullptr runs forward only.
//
// Reductions accumulate in double regardless of the storage type; matrix
// multiplies accumulate in the storage type for speed.

namespace distaudit {

namespace detail {

template <typename Real>
void ensure_matrix(const TensorT<Real>& t, const char* op) {
  if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected a 2-d tensor");
}

// Row log-softmax into a double buffer, shared by the fused loss ops and by
// inference helpers so that identical inputs give bitwise identical outputs
// no matter which code path asked.
template <typename Real>
void log_softmax_row(const Real* x, int n, double* out) {
  double m = static_cast<double>(x[0]);
  for (int j = 1; j < n; ++j) m = std::max(m, static_cast<double>(x[j]));
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(x[j]) - m);
  const double lse = m + std::log(z);
  for (int j = 0; j < n; ++j) out[j] = static_cast<double>(x[j]) - lse;
}

inline std::string dim2(int r, int c) {
  return "[" + std::to_string(r) + " x " + std::to_string(c) + "]";
}

inline constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluB = 0.044715;

// tanh of the GELU inner polynomial, written through the exponential identity
// tanh(u) = 1 - 2 / (exp(2u) + 1). In single precision this resolves to expf,
// which is much cheaper than tanh and saturates to exactly +-1 on overflow.
// Forward and backward share it so the derivative matches the evaluated curve.
template <typename Real>
inline Real gelu_tanh(Real v) {
  const Real u = static_cast<Real>(kGeluA) * (v + static_cast<Real>(kGeluB) * v * v * v);
  return Real(1) - Real(2) / (std::exp(Real(2) * u) + Real(1));
}

}  // namespace detail

template <typename Real>
TensorT<Real> add(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  ensure_same_shape(a, b, "add");
  TensorT<Real> out(a.shape, tape && (a.requires_grad || b.requires_grad));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  ensure_finite(out, "add");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (a.requires_grad) tape->watch(a.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad, ag = a.requires_grad ? a.grad : nullptr,
         bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ag, bg, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        if (ag) (*ag)[i] += (*og)[i];
        if (bg) (*bg)[i] += (*og)[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> sub(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  ensure_same_shape(a, b, "sub");
  TensorT<Real> out(a.shape, tape && (a.requires_grad || b.requires_grad));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  ensure_finite(out, "sub");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (a.requires_grad) tape->watch(a.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad, ag = a.requires_grad ? a.grad : nullptr,
         bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ag, bg, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        if (ag) (*ag)[i] += (*og)[i];
        if (bg) (*bg)[i] -= (*og)[i];
      }
    });
  }
  return out;
}

// Elementwise product.
template <typename Real>
TensorT<Real> mul(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  ensure_same_shape(a, b, "mul");
  TensorT<Real> out(a.shape, tape && (a.requires_grad || b.requires_grad));
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  ensure_finite(out, "mul");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (a.requires_grad) tape->watch(a.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad, ad = a.data, bd = b.data;
    auto ag = a.requires_grad ? a.grad : nullptr, bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ad, bd, ag, bg, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        if (ag) (*ag)[i] += (*og)[i] * (*bd)[i];
        if (bg) (*bg)[i] += (*og)[i] * (*ad)[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> scale(TapeT<Real>* tape, const TensorT<Real>& a, Real c) {
  TensorT<Real> out(a.shape, tape && a.requires_grad);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  ensure_finite(out, "scale");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(a.grad);
    auto og = out.grad, ag = a.grad;
    tape->record([og, ag, c, n]() {
      for (std::size_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * c;
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> sum(TapeT<Real>* tape, const TensorT<Real>& a) {
  TensorT<Real> out({1}, tape && a.requires_grad);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.at(i));
  out.at(0) = static_cast<Real>(acc);
  ensure_finite(out, "sum");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(a.grad);
    auto og = out.grad, ag = a.grad;
    const std::size_t n = a.numel();
    tape->record([og, ag, n]() {
      const Real g = (*og)[0];
      for (std::size_t i = 0; i < n; ++i) (*ag)[i] += g;
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> mean(TapeT<Real>* tape, const TensorT<Real>& a) {
  TensorT<Real> out({1}, tape && a.requires_grad);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.at(i));
  const std::size_t n = a.numel();
  out.at(0) = static_cast<Real>(acc / static_cast<double>(n));
  ensure_finite(out, "mean");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(a.grad);
    auto og = out.grad, ag = a.grad;
    tape->record([og, ag, n]() {
      const Real g = (*og)[0] / static_cast<Real>(n);
      for (std::size_t i = 0; i < n; ++i) (*ag)[i] += g;
    });
  }
  return out;
}

// C = A * B with A [M x K], B [K x N].
template <typename Real>
TensorT<Real> matmul(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::ensure_matrix(a, "matmul");
  detail::ensure_matrix(b, "matmul");
  const int M = a.shape[0], K = a.shape[1], N = b.shape[1];
  if (b.shape[0] != K)
    throw DimensionError("matmul: inner dimensions disagree, " + detail::dim2(M, K) + " * " +
                         detail::dim2(b.shape[0], N));
  TensorT<Real> out({M, N}, tape && (a.requires_grad || b.requires_grad));
  kernels::mm_nn(a.ptr(), b.ptr(), out.ptr(), M, K, N);
  ensure_finite(out, "matmul");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (a.requires_grad) tape->watch(a.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad, ad = a.data, bd = b.data;
    auto ag = a.requires_grad ? a.grad : nullptr, bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ad, bd, ag, bg, M, K, N]() {
      if (ag) kernels::mm_nt(og->data(), bd->data(), ag->data(), M, N, K);
      if (bg) kernels::mm_tn(ad->data(), og->data(), bg->data(), M, K, N);
    });
  }
  return out;
}

// C = A * B^T with A [M x K], B [N x K]. Used for tied-embedding logits.
template <typename Real>
TensorT<Real> matmul_nt(TapeT<Real>* tape, const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::ensure_matrix(a, "matmul_nt");
  detail::ensure_matrix(b, "matmul_nt");
  const int M = a.shape[0], K = a.shape[1], N = b.shape[0];
  if (b.shape[1] != K)
    throw DimensionError("matmul_nt: inner dimensions disagree, " + detail::dim2(M, K) +
                         " * transpose of " + detail::dim2(N, b.shape[1]));
  TensorT<Real> out({M, N}, tape && (a.requires_grad || b.requires_grad));
  kernels::mm_nt(a.ptr(), b.ptr(), out.ptr(), M, K, N);
  ensure_finite(out, "matmul_nt");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (a.requires_grad) tape->watch(a.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad, ad = a.data, bd = b.data;
    auto ag = a.requires_grad ? a.grad : nullptr, bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, ad, bd, ag, bg, M, K, N]() {
      if (ag) kernels::mm_nn(og->data(), bd->data(), ag->data(), M, N, K);
      if (bg) kernels::mm_tn(og->data(), ad->data(), bg->data(), M, N, K);
    });
  }
  return out;
}

// Adds a row vector b [C] to every row of x [R x C].
template <typename Real>
TensorT<Real> add_bias(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& b) {
  detail::ensure_matrix(x, "add_bias");
  if (b.ndim() != 1 || b.shape[0] != x.shape[1])
    throw DimensionError("add_bias: bias length does not match column count");
  const int R = x.shape[0], C = x.shape[1];
  TensorT<Real> out({R, C}, tape && (x.requires_grad || b.requires_grad));
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out.at(static_cast<std::size_t>(r) * C + c) =
          x.at(static_cast<std::size_t>(r) * C + c) + b.at(c);
  ensure_finite(out, "add_bias");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (x.requires_grad) tape->watch(x.grad);
    if (b.requires_grad) tape->watch(b.grad);
    auto og = out.grad;
    auto xg = x.requires_grad ? x.grad : nullptr, bg = b.requires_grad ? b.grad : nullptr;
    tape->record([og, xg, bg, R, C]() {
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) {
          const Real g = (*og)[static_cast<std::size_t>(r) * C + c];
          if (xg) (*xg)[static_cast<std::size_t>(r) * C + c] += g;
          if (bg) (*bg)[c] += g;
        }
    });
  }
  return out;
}

// Gathers table rows by id. Backward scatter-adds row grads in id order.
template <typename Real>
TensorT<Real> embedding_lookup(TapeT<Real>* tape, const TensorT<Real>& table,
                               std::span<const int> ids) {
  detail::ensure_matrix(table, "embedding_lookup");
  if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
  const int V = table.shape[0], C = table.shape[1];
  for (int id : ids)
    if (id < 0 || id >= V)
      throw VocabError("embedding_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(V) + ")");
  const int R = static_cast<int>(ids.size());
  TensorT<Real> out({R, C}, tape && table.requires_grad);
  for (int r = 0; r < R; ++r)
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[r]) * C, C,
                out.ptr() + static_cast<std::size_t>(r) * C);
  ensure_finite(out, "embedding_lookup");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(table.grad);
    auto og = out.grad, tg = table.grad;
    std::vector<int> idv(ids.begin(), ids.end());
    tape->record([og, tg, idv, C]() {
      for (std::size_t r = 0; r < idv.size(); ++r) {
        const Real* g = og->data() + r * C;
        Real* dst = tg->data() + static_cast<std::size_t>(idv[r]) * C;
        for (int c = 0; c < C; ++c) dst[c] += g[c];
      }
    });
  }
  return out;
}

// Row-wise layer normalization with learned gain and bias. Statistics are
// accumulated in double.
template <typename Real>
TensorT<Real> layer_norm(TapeT<Real>* tape, const TensorT<Real>& x, const TensorT<Real>& gain,
                         const TensorT<Real>& bias, double eps = 1e-5) {
  detail::ensure_matrix(x, "layer_norm");
  const int R = x.shape[0], C = x.shape[1];
  if (gain.ndim() != 1 || gain.shape[0] != C || bias.ndim() != 1 || bias.shape[0] != C)
    throw DimensionError("layer_norm: gain/bias length does not match column count");
  bool needs = tape && (x.requires_grad || gain.requires_grad || bias.requires_grad);
  TensorT<Real> out({R, C}, needs);
  auto xhat = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(R) * C);
  auto isig = std::make_shared<std::vector<double>>(R);
  for (int r = 0; r < R; ++r) {
    const Real* xr = x.ptr() + static_cast<std::size_t>(r) * C;
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += static_cast<double>(xr[c]);
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      const double d = static_cast<double>(xr[c]) - mu;
      var += d * d;
    }
    var /= C;
    const double is = 1.0 / std::sqrt(var + eps);
    (*isig)[r] = is;
    for (int c = 0; c < C; ++c) {
      const double xh = (static_cast<double>(xr[c]) - mu) * is;
      (*xhat)[static_cast<std::size_t>(r) * C + c] = static_cast<Real>(xh);
      out.at(static_cast<std::size_t>(r) * C + c) =
          static_cast<Real>(xh * static_cast<double>(gain.at(c)) + static_cast<double>(bias.at(c)));
    }
  }
  ensure_finite(out, "layer_norm");
  if (out.requires_grad) {
    tape->watch(out.grad);
    if (x.requires_grad) tape->watch(x.grad);
    if (gain.requires_grad) tape->watch(gain.grad);
    if (bias.requires_grad) tape->watch(bias.grad);
    auto og = out.grad, gd = gain.data;
    auto xg = x.requires_grad ? x.grad : nullptr;
    auto gg = gain.requires_grad ? gain.grad : nullptr;
    auto bgr = bias.requires_grad ? bias.grad : nullptr;
    tape->record([og, gd, xg, gg, bgr, xhat, isig, R, C]() {
      for (int r = 0; r < R; ++r) {
        const Real* g = og->data() + static_cast<std::size_t>(r) * C;
        const Real* xh = xhat->data() + static_cast<std::size_t>(r) * C;
        if (gg || bgr) {
          for (int c = 0; c < C; ++c) {
            if (gg) (*gg)[c] += g[c] * xh[c];
            if (bgr) (*bgr)[c] += g[c];
          }
        }
        if (xg) {
          // ghat = g * gain; dx = isig * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
          double m1 = 0.0, m2 = 0.0;
          for (int c = 0; c < C; ++c) {
            const double gh = static_cast<double>(g[c]) * static_cast<double>((*gd)[c]);
            m1 += gh;
            m2 += gh * static_cast<double>(xh[c]);
          }
          m1 /= C;
          m2 /= C;
          Real* dx = xg->data() + static_cast<std::size_t>(r) * C;
          for (int c = 0; c < C; ++c) {
            const double gh = static_cast<double>(g[c]) * static_cast<double>((*gd)[c]);
            dx[c] += static_cast<Real>((*isig)[r] * (gh - m1 - static_cast<double>(xh[c]) * m2));
          }
        }
      }
    });
  }
  return out;
}

// GELU, tanh approximation.
template <typename Real>
TensorT<Real> gelu(TapeT<Real>* tape, const TensorT<Real>& x) {
  TensorT<Real> out(x.shape, tape && x.requires_grad);
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = x.at(i);
    const Real t = detail::gelu_tanh(v);
    out.at(i) = Real(0.5) * v * (Real(1) + t);
  }
  ensure_finite(out, "gelu");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(x.grad);
    auto og = out.grad, xd = x.data, xg = x.grad;
    tape->record([og, xd, xg, n]() {
      for (std::size_t i = 0; i < n; ++i) {
        const Real v = (*xd)[i];
        const Real t = detail::gelu_tanh(v);
        const Real d = Real(0.5) * (Real(1) + t) +
                       Real(0.5) * v * (Real(1) - t * t) * static_cast<Real>(detail::kGeluA) *
                           (Real(1) + Real(3) * static_cast<Real>(detail::kGeluB) * v * v);
        (*xg)[i] += (*og)[i] * d;
      }
    });
  }
  return out;
}

// Copies rows [r0, r1) of x. Backward adds into the matching row range.
template <typename Real>
TensorT<Real> slice_rows(TapeT<Real>* tape, const TensorT<Real>& x, int r0, int r1) {
  detail::ensure_matrix(x, "slice_rows");
  const int R = x.shape[0], C = x.shape[1];
  if (r0 < 0 || r1 > R || r0 >= r1) throw DimensionError("slice_rows: bad row range");
  TensorT<Real> out({r1 - r0, C}, tape && x.requires_grad);
  std::copy_n(x.ptr() + static_cast<std::size_t>(r0) * C,
              static_cast<std::size_t>(r1 - r0) * C, out.ptr());
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(x.grad);
    auto og = out.grad, xg = x.grad;
    tape->record([og, xg, r0, r1, C]() {
      for (int r = r0; r < r1; ++r) {
        const Real* g = og->data() + static_cast<std::size_t>(r - r0) * C;
        Real* dst = xg->data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) dst[c] += g[c];
      }
    });
  }
  return out;
}

// Copies columns [c0, c1) of x. Backward adds into the matching columns.
template <typename Real>
TensorT<Real> slice_cols(TapeT<Real>* tape, const TensorT<Real>& x, int c0, int c1) {
  detail::ensure_matrix(x, "slice_cols");
  const int R = x.shape[0], C = x.shape[1];
  if (c0 < 0 || c1 > C || c0 >= c1) throw DimensionError("slice_cols: bad column range");
  const int W = c1 - c0;
  TensorT<Real> out({R, W}, tape && x.requires_grad);
  for (int r = 0; r < R; ++r)
    std::copy_n(x.ptr() + static_cast<std::size_t>(r) * C + c0, W,
                out.ptr() + static_cast<std::size_t>(r) * W);
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(x.grad);
    auto og = out.grad, xg = x.grad;
    tape->record([og, xg, R, C, c0, W]() {
      for (int r = 0; r < R; ++r) {
        const Real* g = og->data() + static_cast<std::size_t>(r) * W;
        Real* dst = xg->data() + static_cast<std::size_t>(r) * C + c0;
        for (int c = 0; c < W; ++c) dst[c] += g[c];
      }
    });
  }
  return out;
}

// Row-wise softmax with max subtraction; normalizers accumulate in double.
template <typename Real>
TensorT<Real> softmax(TapeT<Real>* tape, const TensorT<Real>& x) {
  detail::ensure_matrix(x, "softmax");
  const int R = x.shape[0], C = x.shape[1];
  TensorT<Real> out({R, C}, tape && x.requires_grad);
  std::vector<double> lp(C);
  for (int r = 0; r < R; ++r) {
    detail::log_softmax_row(x.ptr() + static_cast<std::size_t>(r) * C, C, lp.data());
    for (int c = 0; c < C; ++c)
      out.at(static_cast<std::size_t>(r) * C + c) = static_cast<Real>(std::exp(lp[c]));
  }
  ensure_finite(out, "softmax");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(x.grad);
    auto og = out.grad, od = out.data, xg = x.grad;
    tape->record([og, od, xg, R, C]() {
      for (int r = 0; r < R; ++r) {
        const Real* g = og->data() + static_cast<std::size_t>(r) * C;
        const Real* p = od->data() + static_cast<std::size_t>(r) * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += static_cast<double>(g[c]) * static_cast<double>(p[c]);
        Real* dx = xg->data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c)
          dx[c] += static_cast<Real>(static_cast<double>(p[c]) *
                                     (static_cast<double>(g[c]) - dot));
      }
    });
  }
  return out;
}

// Row-wise log-softmax.
template <typename Real>
TensorT<Real> log_softmax(TapeT<Real>* tape, const TensorT<Real>& x) {
  detail::ensure_matrix(x, "log_softmax");
  const int R = x.shape[0], C = x.shape[1];
  TensorT<Real> out({R, C}, tape && x.requires_grad);
  std::vector<double> lp(C);
  for (int r = 0; r < R; ++r) {
    detail::log_softmax_row(x.ptr() + static_cast<std::size_t>(r) * C, C, lp.data());
    for (int c = 0; c < C; ++c) out.at(static_cast<std::size_t>(r) * C + c) = static_cast<Real>(lp[c]);
  }
  ensure_finite(out, "log_softmax");
  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(x.grad);
    auto og = out.grad, od = out.data, xg = x.grad;
    tape->record([og, od, xg, R, C]() {
      for (int r = 0; r < R; ++r) {
        const Real* g = og->data() + static_cast<std::size_t>(r) * C;
        const Real* l = od->data() + static_cast<std::size_t>(r) * C;
        double gsum = 0.0;
        for (int c = 0; c < C; ++c) gsum += static_cast<double>(g[c]);
        Real* dx = xg->data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c)
          dx[c] += static_cast<Real>(static_cast<double>(g[c]) -
                                     std::exp(static_cast<double>(l[c])) * gsum);
      }
    });
  }
  return out;
}

// Multi-head causal self-attention over a single sequence. q, k, v are
// [T x d]; head h uses the column block [h*dh, (h+1)*dh). Scores are scaled
// by 1/sqrt(dh) and masked so position i attends to j <= i only.
template <typename Real>
TensorT<Real> causal_self_attention(TapeT<Real>* tape, const TensorT<Real>& q,
                                    const TensorT<Real>& k, const TensorT<Real>& v, int n_heads) {
  detail::ensure_matrix(q, "attention");
  ensure_same_shape(q, k, "attention");
  ensure_same_shape(q, v, "attention");
  const int T = q.shape[0], D = q.shape[1];
  if (n_heads < 1 || D % n_heads != 0)
    throw DimensionError("attention: head count must divide the model width");
  const int H = n_heads, dh = D / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  bool needs = tape && (q.requires_grad || k.requires_grad || v.requires_grad);
  TensorT<Real> out({T, D}, needs);

  auto gather = [&](const TensorT<Real>& src, int h, std::vector<Real>& dst) {
    for (int t = 0; t < T; ++t)
      std::copy_n(src.ptr() + static_cast<std::size_t>(t) * D + h * dh, dh,
                  dst.data() + static_cast<std::size_t>(t) * dh);
  };

  // Per-head attention probabilities, kept for backward.
  auto probs = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(H) * T * T, Real(0));
  std::vector<Real> qh(static_cast<std::size_t>(T) * dh), kh(qh.size()), vh(qh.size());
  std::vector<Real> scores(static_cast<std::size_t>(T) * T);
  std::vector<Real> ctx(static_cast<std::size_t>(T) * dh);
  for (int h = 0; h < H; ++h) {
    gather(q, h, qh);
    gather(k, h, kh);
    gather(v, h, vh);
    std::fill(scores.begin(), scores.end(), Real(0));
    kernels::mm_nt(qh.data(), kh.data(), scores.data(), T, dh, T);
    Real* P = probs->data() + static_cast<std::size_t>(h) * T * T;
    for (int i = 0; i < T; ++i) {
      const Real* srow = scores.data() + static_cast<std::size_t>(i) * T;
      double m = -1e300;
      for (int j = 0; j <= i; ++j) m = std::max(m, static_cast<double>(srow[j]) * inv_sqrt);
      // One exp per entry, stored shifted, then normalized in place. The
      // shifted exponent is <= 0 so the working-precision exp cannot overflow;
      // the row sum stays in double to keep the normalizer exact.
      Real* prow = P + static_cast<std::size_t>(i) * T;
      double z = 0.0;
      for (int j = 0; j <= i; ++j) {
        const Real e = std::exp(static_cast<Real>(static_cast<double>(srow[j]) * inv_sqrt - m));
        prow[j] = e;
        z += static_cast<double>(e);
      }
      const Real inv_z = static_cast<Real>(1.0 / z);
      for (int j = 0; j <= i; ++j) prow[j] *= inv_z;
    }
    std::fill(ctx.begin(), ctx.end(), Real(0));
    kernels::mm_nn(P, vh.data(), ctx.data(), T, T, dh);
    for (int t = 0; t < T; ++t)
      std::copy_n(ctx.data() + static_cast<std::size_t>(t) * dh, dh,
                  out.ptr() + static_cast<std::size_t>(t) * D + h * dh);
  }
  ensure_finite(out, "attention");

  if (out.requires_grad) {
    tape->watch(out.grad);
    if (q.requires_grad) tape->watch(q.grad);
    if (k.requires_grad) tape->watch(k.grad);
    if (v.requires_grad) tape->watch(v.grad);
    auto og = out.grad, qd = q.data, kd = k.data, vd = v.data;
    auto qg = q.requires_grad ? q.grad : nullptr;
    auto kg = k.requires_grad ? k.grad : nullptr;
    auto vg = v.requires_grad ? v.grad : nullptr;
    tape->record([og, qd, kd, vd, qg, kg, vg, probs, T, D, H, dh, inv_sqrt]() {
      std::vector<Real> qh(static_cast<std::size_t>(T) * dh), kh(qh.size()), vh(qh.size());
      std::vector<Real> gctx(qh.size()), dhead(qh.size());
      std::vector<Real> dP(static_cast<std::size_t>(T) * T), dS(dP.size());
      auto gather_raw = [&](const std::vector<Real>& src, int h, std::vector<Real>& dst) {
        for (int t = 0; t < T; ++t)
          std::copy_n(src.data() + static_cast<std::size_t>(t) * D + h * dh, dh,
                      dst.data() + static_cast<std::size_t>(t) * dh);
      };
      auto scatter_add = [&](std::vector<Real>& dst, int h, const std::vector<Real>& src) {
        for (int t = 0; t < T; ++t) {
          const Real* s = src.data() + static_cast<std::size_t>(t) * dh;
          Real* d = dst.data() + static_cast<std::size_t>(t) * D + h * dh;
          for (int c = 0; c < dh; ++c) d[c] += s[c];
        }
      };
      for (int h = 0; h < H; ++h) {
        gather_raw(*qd, h, qh);
        gather_raw(*kd, h, kh);
        gather_raw(*vd, h, vh);
        gather_raw(*og, h, gctx);
        const Real* P = probs->data() + static_cast<std::size_t>(h) * T * T;
        if (vg) {
          std::fill(dhead.begin(), dhead.end(), Real(0));
          kernels::mm_tn(P, gctx.data(), dhead.data(), T, T, dh);
          scatter_add(*vg, h, dhead);
        }
        std::fill(dP.begin(), dP.end(), Real(0));
        kernels::mm_nt(gctx.data(), vh.data(), dP.data(), T, dh, T);
        for (int i = 0; i < T; ++i) {
          const Real* prow = P + static_cast<std::size_t>(i) * T;
          const Real* dprow = dP.data() + static_cast<std::size_t>(i) * T;
          double dot = 0.0;
          for (int j = 0; j <= i; ++j)
            dot += static_cast<double>(prow[j]) * static_cast<double>(dprow[j]);
          Real* dsrow = dS.data() + static_cast<std::size_t>(i) * T;
          for (int j = 0; j < T; ++j)
            dsrow[j] = (j <= i) ? static_cast<Real>(static_cast<double>(prow[j]) *
                                                    (static_cast<double>(dprow[j]) - dot) *
                                                    inv_sqrt)
                                : Real(0);
        }
        if (qg) {
          std::fill(dhead.begin(), dhead.end(), Real(0));
          kernels::mm_nn(dS.data(), kh.data(), dhead.data(), T, T, dh);
          scatter_add(*qg, h, dhead);
        }
        if (kg) {
          std::fill(dhead.begin(), dhead.end(), Real(0));
          kernels::mm_tn(dS.data(), qh.data(), dhead.data(), T, T, dh);
          scatter_add(*kg, h, dhead);
        }
      }
    });
  }
  return out;
}

// Mean negative log-likelihood of ids over rows where mask is nonzero.
// The backward is the fused closed form (softmax - onehot) / n_masked.
template <typename Real>
TensorT<Real> cross_entropy_from_logits(TapeT<Real>* tape, const TensorT<Real>& logits,
                                        std::span<const int> ids,
                                        std::span<const std::uint8_t> mask) {
  detail::ensure_matrix(logits, "cross_entropy");
  const int R = logits.shape[0], V = logits.shape[1];
  if (static_cast<int>(ids.size()) != R || static_cast<int>(mask.size()) != R)
    throw DimensionError("cross_entropy: ids/mask length must equal the row count");
  std::vector<int> active;
  for (int r = 0; r < R; ++r)
    if (mask[r]) {
      if (ids[r] < 0 || ids[r] >= V)
        throw VocabError("cross_entropy: id " + std::to_string(ids[r]) + " outside [0, " +
                         std::to_string(V) + ")");
      active.push_back(r);
    }
  if (active.empty()) throw ContractError("cross_entropy: mask selects no rows");
  const std::size_t n = active.size();

  TensorT<Real> out({1}, tape && logits.requires_grad);
  auto probs = std::make_shared<std::vector<Real>>(n * V);
  std::vector<double> lp(V);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    const int r = active[a];
    detail::log_softmax_row(logits.ptr() + static_cast<std::size_t>(r) * V, V, lp.data());
    total -= lp[ids[r]];
    for (int c = 0; c < V; ++c) (*probs)[a * V + c] = static_cast<Real>(std::exp(lp[c]));
  }
  out.at(0) = static_cast<Real>(total / static_cast<double>(n));
  ensure_finite(out, "cross_entropy");

  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(logits.grad);
    auto og = out.grad, lg = logits.grad;
    std::vector<int> act = active;
    std::vector<int> gold;
    gold.reserve(n);
    for (int r : active) gold.push_back(ids[r]);
    tape->record([og, lg, probs, act, gold, V, n]() {
      const Real coef = (*og)[0] / static_cast<Real>(n);
      for (std::size_t a = 0; a < n; ++a) {
        const Real* p = probs->data() + a * V;
        Real* dst = lg->data() + static_cast<std::size_t>(act[a]) * V;
        for (int c = 0; c < V; ++c) dst[c] += coef * p[c];
        dst[gold[a]] -= coef;
      }
    });
  }
  return out;
}

// Temperature-softened cross entropy H(q_tau, p_tau) between a frozen
// teacher row distribution and the student, averaged over masked rows.
// Gradients flow to the student only; the backward is
// (p_tau - q_tau) / (tau * n_masked).
template <typename Real>
TensorT<Real> soft_cross_entropy(TapeT<Real>* tape, const TensorT<Real>& student_logits,
                                 const TensorT<Real>& teacher_logits,
                                 std::span<const std::uint8_t> mask, double tau) {
  detail::ensure_matrix(student_logits, "soft_cross_entropy");
  ensure_same_shape(student_logits, teacher_logits, "soft_cross_entropy");
  if (!(tau > 0.0)) throw ContractError("soft_cross_entropy: temperature must be positive");
  const int R = student_logits.shape[0], V = student_logits.shape[1];
  if (static_cast<int>(mask.size()) != R)
    throw DimensionError("soft_cross_entropy: mask length must equal the row count");
  std::vector<int> active;
  for (int r = 0; r < R; ++r)
    if (mask[r]) active.push_back(r);
  if (active.empty()) throw ContractError("soft_cross_entropy: mask selects no rows");
  const std::size_t n = active.size();

  TensorT<Real> out({1}, tape && student_logits.requires_grad);
  auto sprobs = std::make_shared<std::vector<Real>>(n * V);
  auto tprobs = std::make_shared<std::vector<Real>>(n * V);
  std::vector<Real> srow(V), trow(V);
  std::vector<double> slp(V), tlp(V);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    const int r = active[a];
    for (int c = 0; c < V; ++c) {
      srow[c] = static_cast<Real>(
          static_cast<double>(student_logits.at(static_cast<std::size_t>(r) * V + c)) / tau);
      trow[c] = static_cast<Real>(
          static_cast<double>(teacher_logits.at(static_cast<std::size_t>(r) * V + c)) / tau);
    }
    detail::log_softmax_row(srow.data(), V, slp.data());
    detail::log_softmax_row(trow.data(), V, tlp.data());
    double h = 0.0;
    for (int c = 0; c < V; ++c) {
      const double q = std::exp(tlp[c]);
      h -= q * slp[c];
      (*sprobs)[a * V + c] = static_cast<Real>(std::exp(slp[c]));
      (*tprobs)[a * V + c] = static_cast<Real>(q);
    }
    total += h;
  }
  out.at(0) = static_cast<Real>(total / static_cast<double>(n));
  ensure_finite(out, "soft_cross_entropy");

  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(student_logits.grad);
    auto og = out.grad, lg = student_logits.grad;
    std::vector<int> act = active;
    tape->record([og, lg, sprobs, tprobs, act, V, n, tau]() {
      const Real coef = static_cast<Real>(static_cast<double>((*og)[0]) /
                                          (tau * static_cast<double>(n)));
      for (std::size_t a = 0; a < n; ++a) {
        const Real* ps = sprobs->data() + a * V;
        const Real* pt = tprobs->data() + a * V;
        Real* dst = lg->data() + static_cast<std::size_t>(act[a]) * V;
        for (int c = 0; c < V; ++c) dst[c] += coef * (ps[c] - pt[c]);
      }
    });
  }
  return out;
}

// Weighted sum over rows of KL(softmax(logits_r) || exp(teacher_logp_r)).
// teacher_logp holds frozen log-probabilities, row-major, same extent as
// logits. Backward per row: w * q_j * (a_j - KL_r) with a = log q - logp.
template <typename Real>
TensorT<Real> reverse_kl_rows(TapeT<Real>* tape, const TensorT<Real>& logits,
                              const std::vector<double>& teacher_logp,
                              const std::vector<double>& row_weights) {
  detail::ensure_matrix(logits, "reverse_kl");
  const int R = logits.shape[0], V = logits.shape[1];
  if (teacher_logp.size() != static_cast<std::size_t>(R) * V)
    throw DimensionError("reverse_kl: teacher log-prob extent mismatch");
  if (row_weights.size() != static_cast<std::size_t>(R))
    throw DimensionError("reverse_kl: weight count must equal the row count");

  TensorT<Real> out({1}, tape && logits.requires_grad);
  auto slp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R) * V);
  auto kl = std::make_shared<std::vector<double>>(R);
  double total = 0.0;
  for (int r = 0; r < R; ++r) {
    double* lrow = slp->data() + static_cast<std::size_t>(r) * V;
    detail::log_softmax_row(logits.ptr() + static_cast<std::size_t>(r) * V, V, lrow);
    const double* trow = teacher_logp.data() + static_cast<std::size_t>(r) * V;
    double acc = 0.0;
    for (int c = 0; c < V; ++c) {
      const double q = std::exp(lrow[c]);
      if (q > 0.0) acc += q * (lrow[c] - trow[c]);
    }
    (*kl)[r] = acc;
    total += row_weights[r] * acc;
  }
  out.at(0) = static_cast<Real>(total);
  ensure_finite(out, "reverse_kl");

  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(logits.grad);
    auto og = out.grad, lg = logits.grad;
    auto tl = std::make_shared<std::vector<double>>(teacher_logp);
    auto w = std::make_shared<std::vector<double>>(row_weights);
    tape->record([og, lg, slp, kl, tl, w, R, V]() {
      const double g = static_cast<double>((*og)[0]);
      for (int r = 0; r < R; ++r) {
        const double* lrow = slp->data() + static_cast<std::size_t>(r) * V;
        const double* trow = tl->data() + static_cast<std::size_t>(r) * V;
        Real* dst = lg->data() + static_cast<std::size_t>(r) * V;
        const double wr = (*w)[r] * g;
        for (int c = 0; c < V; ++c) {
          const double q = std::exp(lrow[c]);
          if (q > 0.0)
            dst[c] += static_cast<Real>(wr * q * (lrow[c] - trow[c] - (*kl)[r]));
        }
      }
    });
  }
  return out;
}

// Sum over rows of coeff_r * log softmax(logits_r)[id_r]. The score-function
// building block: coefficients are treated as constants.
template <typename Real>
TensorT<Real> picked_logprob_weighted(TapeT<Real>* tape, const TensorT<Real>& logits,
                                      std::span<const int> ids,
                                      const std::vector<double>& coeffs) {
  detail::ensure_matrix(logits, "picked_logprob");
  const int R = logits.shape[0], V = logits.shape[1];
  if (static_cast<int>(ids.size()) != R || coeffs.size() != static_cast<std::size_t>(R))
    throw DimensionError("picked_logprob: ids/coeff count must equal the row count");
  for (int r = 0; r < R; ++r)
    if (ids[r] < 0 || ids[r] >= V)
      throw VocabError("picked_logprob: id outside vocabulary");

  TensorT<Real> out({1}, tape && logits.requires_grad);
  auto slp = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R) * V);
  double total = 0.0;
  for (int r = 0; r < R; ++r) {
    double* lrow = slp->data() + static_cast<std::size_t>(r) * V;
    detail::log_softmax_row(logits.ptr() + static_cast<std::size_t>(r) * V, V, lrow);
    total += coeffs[r] * lrow[ids[r]];
  }
  out.at(0) = static_cast<Real>(total);
  ensure_finite(out, "picked_logprob");

  if (out.requires_grad) {
    tape->watch(out.grad);
    tape->watch(logits.grad);
    auto og = out.grad, lg = logits.grad;
    std::vector<int> idv(ids.begin(), ids.end());
    auto cf = std::make_shared<std::vector<double>>(coeffs);
    tape->record([og, lg, slp, idv, cf, R, V]() {
      const double g = static_cast<double>((*og)[0]);
      for (int r = 0; r < R; ++r) {
        const double* lrow = slp->data() + static_cast<std::size_t>(r) * V;
        const double cr = (*cf)[r] * g;
        Real* dst = lg->data() + static_cast<std::size_t>(r) * V;
        for (int c = 0; c < V; ++c) dst[c] -= static_cast<Real>(cr * std::exp(lrow[c]));
        dst[idv[r]] += static_cast<Real>(cr);
      }
    });
  }
  return out;
}

// Forward-only helper: log-softmax of one row as doubles.
template <typename Real>
std::vector<double> log_softmax_values(const Real* row, int n) {
  std::vector<double> out(n);
  detail::log_softmax_row(row, n, out.data());
  return out;
}

}  // namespace distaudit
