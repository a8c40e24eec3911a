#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "distaudit/tensor.hpp"

namespace distaudit {

// Compares reverse-mode gradients against central finite differences.
//
// f builds a scalar loss from the given tape (closing over the parameter
// tensors); with a null tape it must run forward only. Each parameter
// coordinate is perturbed by +/-h in place and restored. Returns the largest
// relative error max |a - n| / max(|a|, |n|, h). Flooring the denominator at
// the step size keeps O(h^2) truncation noise on near-zero coordinates at
// O(h) relative error instead of registering as a failure.
//
// Meaningful only with Real = double: central differences at h = 1e-4 are
// below single precision resolution.
template <typename Real>
double grad_check(const std::function<TensorT<Real>(TapeT<Real>*)>& f,
                  std::span<TensorT<Real>> params, double h = 1e-4) {
  if (!(h > 0.0)) throw ContractError("grad_check: step size must be positive");

  TapeT<Real> tape;
  TensorT<Real> loss = f(&tape);
  if (loss.numel() != 1) throw ContractError("grad_check: f must produce a scalar loss");
  tape.backward(loss);
  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (!p.requires_grad || !p.grad) throw ContractError("grad_check: parameter has no gradient");
    analytic.push_back(*p.grad);
  }

  const double floor = h;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<Real>& x = *params[i].data;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const Real saved = x[j];
      x[j] = static_cast<Real>(static_cast<double>(saved) + h);
      const double up = static_cast<double>(f(nullptr).item());
      x[j] = static_cast<Real>(static_cast<double>(saved) - h);
      const double dn = static_cast<double>(f(nullptr).item());
      x[j] = saved;
      const double numeric = (up - dn) / (2.0 * h);
      const double a = static_cast<double>(analytic[i][j]);
      const double denom = std::max({floor, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace distaudit
