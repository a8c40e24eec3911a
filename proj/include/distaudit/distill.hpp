#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "distaudit/adam.hpp"
#include "distaudit/data.hpp"
#include "distaudit/decode.hpp"
#include "distaudit/losses.hpp"
#include "distaudit/model.hpp"

namespace distaudit {

enum class RegimeKind { SFT, WORD_KD, SEQ_KD, RKLD };

std::string regime_kind_name(RegimeKind kind);
RegimeKind regime_kind_from_name(const std::string& name);

// Short labels used in result tables.
std::string technique_label(RegimeKind kind);

// Token budget used when the teacher rewrites responses for SEQ_KD.
inline constexpr int kSeqKdMaxNewTokens = 80;

struct RkldParams {
  int rollouts_per_prompt = 4;
  double pt_loss_weight = 0.1;
  double importance_clip = 5.0;   // per-sequence weights clipped to [1/clip, clip]
  int max_rollout_tokens = 32;
};

// Hyperparameters of one training run. Fields irrelevant to the selected
// kind are ignored but still validated.
struct TrainingRegime {
  RegimeKind kind = RegimeKind::SFT;
  int epochs = 20;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double learning_rate = 3e-4;
  double word_kd_mix = 0.5;     // alpha
  double kd_temperature = 2.0;  // tau
  int seqkd_beam_width = 4;
  RkldParams rkld;

  void validate() const;
};

struct TrainedModel {
  TransformerParams params;
  ModelConfig config;
  TrainingRegime regime;
  std::vector<float> loss_curve;
};

struct StepDiagnostics {
  double loss = 0.0;
  double kl_estimate = 0.0;  // Monte-Carlo reverse-KL estimate over the rollouts
  double grad_norm_single = 0.0;
  double grad_norm_norm = 0.0;
  double grad_norm_pt = 0.0;
  int rollouts_used = 0;
  int rollouts_clipped = 0;
  bool all_clipped = false;
};

// Masked-mean language-model loss over a padded batch: per-sequence losses
// are combined with weights proportional to their masked token counts, so
// the result is the mean over all masked positions in the batch.
TensorT<float> batch_sft_loss(TapeT<float>* tape, const TransformerParams& params,
                              const Batch& batch);

// Replaces every response with the teacher's beam-search output. Examples
// where the teacher emits nothing (or whose rewritten rendering no longer
// fits the context window) are dropped with a diagnostic. Generic over the
// model so stub teachers can drive it.
template <typename Model>
Corpus build_seqkd_corpus(Model& teacher, const Corpus& corpus, int beam_width,
                          const GenerationBudget& budget,
                          std::vector<std::string>* diagnostics = nullptr) {
  Tokenizer tok;
  Corpus out;
  out.split_tag = corpus.split_tag;
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
    const Example& e = corpus.examples[i];
    const EncodedExample enc = encode_example(e, tok);
    const std::vector<int> ids =
        beam_search_decode(teacher, enc.prompt_ids, beam_width, budget);
    if (ids.empty()) {
      if (diagnostics)
        diagnostics->push_back("example " + std::to_string(i) + ": teacher emitted nothing");
      continue;
    }
    Example rewritten = e;
    rewritten.response = tok.decode(ids);
    if (rendered_length(rewritten, tok) > teacher.config.max_seq_len) {
      if (diagnostics)
        diagnostics->push_back("example " + std::to_string(i) +
                               ": rewritten response does not fit the context window");
      continue;
    }
    out.examples.push_back(std::move(rewritten));
  }
  return out;
}

inline Corpus build_seqkd_corpus(const TrainedModel& teacher, const Corpus& corpus,
                                 int beam_width, const GenerationBudget& budget,
                                 std::vector<std::string>* diagnostics = nullptr) {
  return build_seqkd_corpus(teacher.params, corpus, beam_width, budget, diagnostics);
}

// One RKLD update: sample rollouts from the student for each prompt, then
// apply the three gradient components (exact single-step reverse KL, the
// importance-weighted long-term return term, and the pretraining LM loss)
// in a single Adam step. Gradient component norms are reported separately.
StepDiagnostics rkld_step(TransformerParams& student, const TransformerParams& teacher,
                          const std::vector<EncodedExample>& prompt_batch,
                          const Batch* pretrain_batch, const TrainingRegime& regime,
                          AdamState& opt_state, Rng& rollout_rng);

// Trains a fresh student under the given regime. teacher is required for
// all kinds except SFT; pretrain is required for RKLD. prebuilt_seqkd, when
// given, supplies the SEQ_KD corpus instead of decoding it from the teacher
// (callers can share one decoded corpus across runs).
TrainedModel train(const ModelConfig& student_config, const TrainedModel* teacher,
                   const Corpus& corpus, const TrainingRegime& regime,
                   const Corpus* pretrain = nullptr, const Corpus* prebuilt_seqkd = nullptr);

// Documented seed-splitting helper: stream `a`, then sub-stream `b`, of the
// base seed's stream tree.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace distaudit
