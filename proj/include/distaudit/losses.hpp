#pragma once

#include <span>

#include "distaudit/ops.hpp"

namespace distaudit {

// Mean next-token negative log-likelihood over masked (response) positions.
template <typename Real>
TensorT<Real> sft_loss(TapeT<Real>* tape, const TensorT<Real>& logits, std::span<const int> ids,
                       std::span<const std::uint8_t> mask) {
  return cross_entropy_from_logits(tape, logits, ids, mask);
}

// Word-level distillation loss: masked mean of H(q_tau, p_tau) between the
// temperature-softened teacher and student distributions. Gradients reach
// the student only; the loss is reported as-is (no tau^2 rescaling).
template <typename Real>
TensorT<Real> word_kd_loss(TapeT<Real>* tape, const TensorT<Real>& student_logits,
                           const TensorT<Real>& teacher_logits,
                           std::span<const std::uint8_t> mask, double tau) {
  if (!(tau > 0.0)) throw ConfigError("word_kd_loss: temperature must be positive");
  return soft_cross_entropy(tape, student_logits, teacher_logits, mask, tau);
}

// alpha * word_kd_loss + (1 - alpha) * sft_loss. The boundary values skip
// the unused component entirely, so alpha = 0 runs the exact SFT
// computation (bit-identical losses and gradients).
template <typename Real>
TensorT<Real> mixed_wordkd_loss(TapeT<Real>* tape, const TensorT<Real>& student_logits,
                                const TensorT<Real>& teacher_logits, std::span<const int> ids,
                                std::span<const std::uint8_t> mask, double alpha, double tau) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("mixed_wordkd_loss: alpha must lie in [0, 1]");
  if (alpha == 0.0) return sft_loss(tape, student_logits, ids, mask);
  if (alpha == 1.0) return word_kd_loss(tape, student_logits, teacher_logits, mask, tau);
  TensorT<Real> kd = word_kd_loss(tape, student_logits, teacher_logits, mask, tau);
  TensorT<Real> nll = sft_loss(tape, student_logits, ids, mask);
  return add(tape, scale(tape, kd, static_cast<Real>(alpha)),
             scale(tape, nll, static_cast<Real>(1.0 - alpha)));
}

}  // namespace distaudit
