#pragma once

#include <cmath>
#include <vector>

#include "distaudit/tensor.hpp"

namespace distaudit {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment estimates. Buffers are allocated on the
// first step and must keep their sizes afterwards.
template <typename Real>
struct AdamStateT {
  AdamConfig config;
  long step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

using AdamState = AdamStateT<float>;

// Global L2 norm clipping, in place. Returns the pre-clip norm. The norm is
// accumulated in double; a non-finite norm is an error so that exploding
// losses fail loudly instead of training on garbage.
template <typename Real>
double clip_global_norm(const std::vector<std::vector<Real>*>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto* g : grads)
    for (Real v : *g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip_global_norm: gradient norm is not finite");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* g : grads)
      for (Real& v : *g) v = static_cast<Real>(static_cast<double>(v) * s);
  }
  return norm;
}

// One Adam update with bias correction. Gradients are validated for
// finiteness before any parameter is touched, so a poisoned step leaves the
// model unchanged.
template <typename Real>
void adam_step(const std::vector<TensorT<Real>*>& params,
               const std::vector<const std::vector<Real>*>& grads, AdamStateT<Real>& state) {
  if (params.size() != grads.size())
    throw DimensionError("adam_step: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->size() != params[i]->numel())
      throw DimensionError("adam_step: gradient size does not match parameter");
    for (Real v : *grads[i])
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("adam_step: non-finite gradient");
  }
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i]->numel(), 0.0);
      state.second_moment[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ContractError("adam_step: optimizer state does not match parameter list");

  state.step_count += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != params[i]->numel())
      throw ContractError("adam_step: optimizer state does not match parameter list");
    const std::vector<Real>& g = *grads[i];
    std::vector<Real>& p = *params[i]->data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = static_cast<Real>(static_cast<double>(p[j]) -
                               c.learning_rate * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

// Convenience form reading gradients straight from the parameter tensors.
template <typename Real>
void adam_step(const std::vector<TensorT<Real>*>& params, AdamStateT<Real>& state) {
  std::vector<const std::vector<Real>*> grads;
  grads.reserve(params.size());
  for (auto* p : params) {
    if (!p->requires_grad || !p->grad) throw ContractError("adam_step: parameter has no gradient");
    grads.push_back(p->grad.get());
  }
  adam_step(params, grads, state);
}

}  // namespace distaudit
