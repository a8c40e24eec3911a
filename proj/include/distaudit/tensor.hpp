#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "distaudit/error.hpp"
#include "distaudit/rng.hpp"

namespace distaudit {

// Dense row-major tensor. Storage is shared so tensors are cheap to copy;
// ops allocate fresh outputs and never alias inputs. Tensors that require
// grad always carry an allocated, same-sized grad buffer (invariant kept
// by the constructors below).
template <typename Real>
struct TensorT {
  std::vector<int> shape;
  std::shared_ptr<std::vector<Real>> data;
  std::shared_ptr<std::vector<Real>> grad;
  bool requires_grad = false;

  TensorT() = default;

  explicit TensorT(std::vector<int> shp, bool needs_grad = false) : shape(std::move(shp)) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw DimensionError("tensor: dimensions must be positive");
      n *= static_cast<std::size_t>(d);
    }
    data = std::make_shared<std::vector<Real>>(n, Real(0));
    if (needs_grad) {
      grad = std::make_shared<std::vector<Real>>(n, Real(0));
      requires_grad = true;
    }
  }

  std::size_t numel() const { return data ? data->size() : 0; }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  Real* ptr() { return data->data(); }
  const Real* ptr() const { return data->data(); }
  Real* gptr() { return grad->data(); }
  const Real* gptr() const { return grad->data(); }

  Real& at(std::size_t i) { return (*data)[i]; }
  Real at(std::size_t i) const { return (*data)[i]; }

  // Scalar convenience for loss tensors.
  Real item() const {
    if (numel() != 1) throw ContractError("tensor: item() requires a scalar");
    return (*data)[0];
  }
};

template <typename Real>
TensorT<Real> zeros(std::vector<int> shape, bool needs_grad = false) {
  return TensorT<Real>(std::move(shape), needs_grad);
}

template <typename Real>
TensorT<Real> full(std::vector<int> shape, Real value, bool needs_grad = false) {
  TensorT<Real> t(std::move(shape), needs_grad);
  for (auto& v : *t.data) v = value;
  return t;
}

template <typename Real>
TensorT<Real> from_values(std::vector<int> shape, const std::vector<Real>& values,
                          bool needs_grad = false) {
  TensorT<Real> t(std::move(shape), needs_grad);
  if (values.size() != t.numel())
    throw DimensionError("tensor: value count does not match shape");
  *t.data = values;
  return t;
}

template <typename Real>
TensorT<Real> randn(std::vector<int> shape, Rng& rng, double stddev, bool needs_grad = false) {
  TensorT<Real> t(std::move(shape), needs_grad);
  for (auto& v : *t.data) v = static_cast<Real>(rng.next_gaussian() * stddev);
  return t;
}

template <typename Real>
void ensure_same_shape(const TensorT<Real>& a, const TensorT<Real>& b, const char* op) {
  if (a.shape != b.shape) throw DimensionError(std::string(op) + ": shape mismatch");
}

template <typename Real>
void ensure_finite(const TensorT<Real>& t, const char* op) {
  for (Real v : *t.data)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value in result");
}

// Reverse-mode tape. Ops append a backward closure at creation time;
// backward() replays the closures in strict reverse creation order, which
// makes gradient accumulation order deterministic. Grad buffers touched by
// the recorded ops are registered so they can be zeroed in one sweep.
template <typename Real>
class TapeT {
 public:
  using Grads = std::shared_ptr<std::vector<Real>>;

  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  void watch(const Grads& g) {
    if (g) watched_.push_back(g);
  }

  void zero_grads() {
    for (auto& g : watched_)
      std::fill(g->begin(), g->end(), Real(0));
  }

  // Seeds d loss / d loss = 1 and replays the recorded closures without
  // releasing them. Used when several scalars share one graph and their
  // gradient components must be harvested separately.
  void backward_retain(TensorT<Real>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
    if (!loss.requires_grad || !loss.grad)
      throw ContractError("backward: loss does not require grad");
    (*loss.grad)[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // Standard entry point: zero registered grads, replay, then free the
  // graph. Parameter grad buffers outlive the tape via shared ownership.
  void backward(TensorT<Real>& loss) {
    zero_grads();
    backward_retain(loss);
    clear();
  }

  void clear() {
    nodes_.clear();
    watched_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<Grads> watched_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace distaudit
