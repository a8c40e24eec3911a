#include "distaudit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <span>
#include <utility>

#include "distaudit/gradcheck.hpp"
#include "distaudit/metrics.hpp"

namespace distaudit {

std::string regime_kind_name(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::SFT: return "sft";
    case RegimeKind::WORD_KD: return "word_kd";
    case RegimeKind::SEQ_KD: return "seq_kd";
    case RegimeKind::RKLD: return "rkld";
  }
  throw ContractError("regime_kind_name: unknown kind");
}

RegimeKind regime_kind_from_name(const std::string& name) {
  if (name == "sft") return RegimeKind::SFT;
  if (name == "word_kd") return RegimeKind::WORD_KD;
  if (name == "seq_kd") return RegimeKind::SEQ_KD;
  if (name == "rkld") return RegimeKind::RKLD;
  throw ConfigError("unknown training regime '" + name + "'");
}

std::string technique_label(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::SFT: return "SFT";
    case RegimeKind::WORD_KD: return "KD";
    case RegimeKind::SEQ_KD: return "SeqKD";
    case RegimeKind::RKLD: return "RKLD";
  }
  throw ContractError("technique_label: unknown kind");
}

void TrainingRegime::validate() const {
  if (epochs < 0) throw ConfigError("regime: epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("regime: batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("regime: learning_rate must be positive and finite");
  if (!(word_kd_mix >= 0.0 && word_kd_mix <= 1.0))
    throw ConfigError("regime: word_kd_mix must lie in [0, 1]");
  if (!(kd_temperature > 0.0)) throw ConfigError("regime: kd_temperature must be positive");
  if (seqkd_beam_width < 1) throw ConfigError("regime: seqkd_beam_width must be positive");
  if (rkld.rollouts_per_prompt < 1)
    throw ConfigError("regime: rollouts_per_prompt must be positive");
  if (!(rkld.pt_loss_weight >= 0.0))
    throw ConfigError("regime: pt_loss_weight must be non-negative");
  if (!(rkld.importance_clip >= 1.0))
    throw ConfigError("regime: importance_clip must be at least 1");
  if (rkld.max_rollout_tokens < 1)
    throw ConfigError("regime: max_rollout_tokens must be positive");
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return Rng(base).split(a).split(b).next_u64();
}

namespace {

// Rng stream ids under a regime seed. Streams are derived, never shared, so
// adding a consumer to one phase cannot shift the draws of another.
constexpr std::uint64_t kStreamInit = 0;
constexpr std::uint64_t kStreamEpochShuffle = 1;
constexpr std::uint64_t kStreamRollouts = 2;
constexpr std::uint64_t kStreamWarmShuffle = 3;
constexpr std::uint64_t kStreamPretrainShuffle = 4;
constexpr std::uint64_t kStreamPromptOrder = 5;

// Teacher logits for rows 0..len-2 of each example's full sequence (the
// rows that carry next-token targets), flattened (len-1) x vocab.
struct TeacherCache {
  std::vector<std::vector<float>> rows;
  int vocab = 0;
};

TeacherCache build_teacher_cache(const TransformerParams& teacher, const Corpus& corpus) {
  Tokenizer tok;
  TeacherCache cache;
  cache.vocab = teacher.config.vocab_size;
  cache.rows.reserve(corpus.examples.size());
  for (const Example& e : corpus.examples) {
    const std::vector<int> ids = encode_example(e, tok).full_sequence();
    const TensorT<float> logits = forward_logits(nullptr, teacher, ids);
    const int keep = static_cast<int>(ids.size()) - 1;
    std::vector<float> rows(static_cast<std::size_t>(keep) * cache.vocab);
    std::copy_n(logits.ptr(), rows.size(), rows.data());
    cache.rows.push_back(std::move(rows));
  }
  return cache;
}

// Masked-mean LM loss over a padded batch. Per-sequence losses are masked
// means; combining them with weights n_r / N makes the batch loss the mean
// over every masked position. With a cache the per-sequence loss is the
// word-KD mixture against the cached teacher rows.
TensorT<float> batch_lm_loss(TapeT<float>* tape, const TransformerParams& params,
                             const Batch& batch, const TeacherCache* cache, double alpha,
                             double tau) {
  if (batch.rows == 0) throw ContractError("batch loss: batch is empty");
  std::vector<long> n_masked(batch.rows, 0);
  long total_masked = 0;
  for (int r = 0; r < batch.rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * batch.max_len;
    for (int p = 1; p < batch.lengths[r]; ++p)
      if (batch.mask[base + p]) ++n_masked[r];
    total_masked += n_masked[r];
  }
  if (total_masked == 0) throw ContractError("batch loss: mask selects no positions");

  TensorT<float> acc;
  bool have = false;
  for (int r = 0; r < batch.rows; ++r) {
    if (n_masked[r] == 0) continue;
    const int len = batch.lengths[r];
    const std::size_t base = static_cast<std::size_t>(r) * batch.max_len;
    const std::span<const int> row_ids(batch.ids.data() + base, static_cast<std::size_t>(len));
    TensorT<float> logits = forward_logits(tape, params, row_ids);
    TensorT<float> sliced = slice_rows(tape, logits, 0, len - 1);
    const std::span<const int> labels = row_ids.subspan(1);
    const std::span<const std::uint8_t> label_mask(batch.mask.data() + base + 1,
                                                   static_cast<std::size_t>(len) - 1);
    TensorT<float> piece;
    if (cache) {
      const std::vector<float>& trows = cache->rows.at(batch.example_index[r]);
      TensorT<float> teacher = from_values<float>({len - 1, cache->vocab}, trows);
      piece = mixed_wordkd_loss(tape, sliced, teacher, labels, label_mask, alpha, tau);
    } else {
      piece = sft_loss(tape, sliced, labels, label_mask);
    }
    const float w = static_cast<float>(static_cast<double>(n_masked[r]) /
                                       static_cast<double>(total_masked));
    TensorT<float> term = scale(tape, piece, w);
    acc = have ? add(tape, acc, term) : term;
    have = true;
  }
  return acc;
}

// One pass over the corpus with Adam. Returns the mean step loss; appends
// every step loss to curve.
double lm_epoch(TransformerParams& params, const Corpus& corpus, const TrainingRegime& regime,
                const TeacherCache* cache, std::uint64_t shuffle_seed, AdamState& opt,
                std::vector<float>* curve) {
  const std::vector<Batch> batches = make_batches(corpus, regime.batch_size, shuffle_seed);
  const std::vector<TensorT<float>*> ps = params.all();
  double total = 0.0;
  for (const Batch& batch : batches) {
    TapeT<float> tape;
    TensorT<float> loss =
        batch_lm_loss(&tape, params, batch, cache, regime.word_kd_mix, regime.kd_temperature);
    tape.backward(loss);
    std::vector<std::vector<float>*> grads;
    grads.reserve(ps.size());
    for (auto* p : ps) grads.push_back(p->grad.get());
    clip_global_norm(grads, 1.0);
    adam_step(ps, opt);
    total += static_cast<double>(loss.item());
    if (curve) curve->push_back(loss.item());
  }
  return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

void epoch_note(const char* phase, int epoch, int epochs, double loss) {
  std::fprintf(stderr, "[distaudit] %s epoch %d/%d loss %.4f\n", phase, epoch + 1, epochs, loss);
}

}  // namespace

TensorT<float> batch_sft_loss(TapeT<float>* tape, const TransformerParams& params,
                              const Batch& batch) {
  return batch_lm_loss(tape, params, batch, nullptr, 0.0, 1.0);
}

StepDiagnostics rkld_step(TransformerParams& student, const TransformerParams& teacher,
                          const std::vector<EncodedExample>& prompt_batch,
                          const Batch* pretrain_batch, const TrainingRegime& regime,
                          AdamState& opt_state, Rng& rollout_rng) {
  regime.validate();
  if (student.config.vocab_size != teacher.config.vocab_size)
    throw ConfigError("rkld_step: student and teacher vocabularies differ");
  if (prompt_batch.empty()) throw ContractError("rkld_step: prompt batch is empty");

  const int V = student.config.vocab_size;
  const double pt_weight = regime.rkld.pt_loss_weight;
  const double log_clip = std::log(regime.rkld.importance_clip);
  const GenerationBudget budget{regime.rkld.max_rollout_tokens, Tokenizer::kEos};

  // Sampling first fixes the rollout count n before any loss is formed;
  // both on-policy terms are normalized by n.
  struct Rollout {
    const EncodedExample* prompt;
    std::vector<int> tokens;
  };
  std::vector<Rollout> rollouts;
  for (const EncodedExample& enc : prompt_batch)
    for (int k = 0; k < regime.rkld.rollouts_per_prompt; ++k) {
      SampleResult s = sample_decode(student, enc.prompt_ids, budget, rollout_rng);
      if (!s.tokens.empty()) rollouts.push_back({&enc, std::move(s.tokens)});
    }

  StepDiagnostics diag;
  diag.rollouts_used = static_cast<int>(rollouts.size());
  const int n = diag.rollouts_used;

  TapeT<float> tape;
  TensorT<float> loss_single, loss_norm, loss_pt;
  bool have_on_policy = false;
  double kl_sum = 0.0;

  for (const Rollout& ro : rollouts) {
    const int P = static_cast<int>(ro.prompt->prompt_ids.size());
    const int T = static_cast<int>(ro.tokens.size());
    std::vector<int> seq = ro.prompt->prompt_ids;
    seq.insert(seq.end(), ro.tokens.begin(), ro.tokens.end());

    TensorT<float> s_logits = forward_logits(&tape, student, seq);
    TensorT<float> rows = slice_rows(&tape, s_logits, P - 1, P - 1 + T);
    const TensorT<float> t_logits = forward_logits(nullptr, teacher, seq);

    // Per-position log ratio r_t = log p(y_t) - log q(y_t), both sides
    // through the same log-softmax routine.
    std::vector<double> t_lp(static_cast<std::size_t>(T) * V);
    std::vector<double> r(T);
    for (int t = 0; t < T; ++t) {
      detail::log_softmax_row(t_logits.ptr() + static_cast<std::size_t>(P - 1 + t) * V, V,
                              t_lp.data() + static_cast<std::size_t>(t) * V);
      const std::vector<double> s_lp =
          log_softmax_values(rows.ptr() + static_cast<std::size_t>(t) * V, V);
      r[t] = t_lp[static_cast<std::size_t>(t) * V + ro.tokens[t]] - s_lp[ro.tokens[t]];
    }
    std::vector<double> suffix(T + 1, 0.0);
    for (int t = T - 1; t >= 0; --t) suffix[t] = suffix[t + 1] + r[t];
    kl_sum += -suffix[0] / static_cast<double>(T);

    double w;
    if (suffix[0] > log_clip) {
      w = regime.rkld.importance_clip;
      ++diag.rollouts_clipped;
    } else if (suffix[0] < -log_clip) {
      w = 1.0 / regime.rkld.importance_clip;
      ++diag.rollouts_clipped;
    } else {
      w = std::exp(suffix[0]);
    }

    const std::vector<double> single_w(
        T, 1.0 / (static_cast<double>(n) * static_cast<double>(T)));
    TensorT<float> part_single = reverse_kl_rows(&tape, rows, t_lp, single_w);

    std::vector<double> coeffs(T);
    for (int t = 0; t < T; ++t)
      coeffs[t] = -(w / static_cast<double>(n)) * (suffix[t + 1] / static_cast<double>(T));
    TensorT<float> part_norm = picked_logprob_weighted(&tape, rows, ro.tokens, coeffs);

    loss_single = have_on_policy ? add(&tape, loss_single, part_single) : part_single;
    loss_norm = have_on_policy ? add(&tape, loss_norm, part_norm) : part_norm;
    have_on_policy = true;
  }
  if (n > 0) diag.kl_estimate = kl_sum / static_cast<double>(n);
  diag.all_clipped = n > 0 && diag.rollouts_clipped == n;
  if (diag.all_clipped)
    std::fprintf(stderr, "[distaudit] rkld_step: all %d importance weights clipped\n", n);

  bool have_pt = false;
  if (pt_weight > 0.0 && pretrain_batch) {
    loss_pt = scale(&tape, batch_sft_loss(&tape, student, *pretrain_batch),
                    static_cast<float>(pt_weight));
    have_pt = true;
  }
  if (!have_on_policy && !have_pt) {
    std::fprintf(stderr, "[distaudit] rkld_step: no usable rollouts, skipping update\n");
    return diag;
  }

  const std::vector<TensorT<float>*> ps = student.all();
  std::vector<std::vector<float>> g_total(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) g_total[i].assign(ps[i]->numel(), 0.0f);
  auto harvest = [&](TensorT<float>* comp) -> double {
    if (!comp) return 0.0;
    tape.zero_grads();
    tape.backward_retain(*comp);
    double sq = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::vector<float>& g = *ps[i]->grad;
      for (std::size_t j = 0; j < g.size(); ++j) {
        sq += static_cast<double>(g[j]) * static_cast<double>(g[j]);
        g_total[i][j] += g[j];
      }
    }
    return std::sqrt(sq);
  };
  diag.grad_norm_single = harvest(have_on_policy ? &loss_single : nullptr);
  diag.grad_norm_norm = harvest(have_on_policy ? &loss_norm : nullptr);
  diag.grad_norm_pt = harvest(have_pt ? &loss_pt : nullptr);
  tape.clear();

  double loss = 0.0;
  if (have_on_policy)
    loss += static_cast<double>(loss_single.item()) + static_cast<double>(loss_norm.item());
  if (have_pt) loss += static_cast<double>(loss_pt.item());
  diag.loss = loss;

  std::vector<std::vector<float>*> gp;
  gp.reserve(g_total.size());
  for (auto& g : g_total) gp.push_back(&g);
  clip_global_norm(gp, 1.0);
  std::vector<const std::vector<float>*> gc(g_total.size());
  for (std::size_t i = 0; i < g_total.size(); ++i) gc[i] = &g_total[i];
  adam_step(ps, gc, opt_state);
  return diag;
}

TrainedModel train(const ModelConfig& student_config, const TrainedModel* teacher,
                   const Corpus& corpus, const TrainingRegime& regime, const Corpus* pretrain,
                   const Corpus* prebuilt_seqkd) {
  student_config.validate();
  regime.validate();
  if (corpus.examples.empty()) throw ContractError("train: corpus is empty");
  if (regime.kind != RegimeKind::SFT) {
    if (!teacher)
      throw ConfigError("train: " + regime_kind_name(regime.kind) + " requires a teacher");
    if (teacher->config.vocab_size != student_config.vocab_size)
      throw ConfigError("train: teacher and student vocabularies differ");
  }
  if (regime.kind == RegimeKind::RKLD && regime.rkld.pt_loss_weight > 0.0 &&
      (!pretrain || pretrain->examples.empty()))
    throw ConfigError("train: rkld with a pretraining loss requires a pretraining corpus");

  TrainedModel model;
  model.config = student_config;
  model.regime = regime;
  model.params = init_params<float>(student_config, derive_seed(regime.seed, kStreamInit));

  const std::string phase = regime_kind_name(regime.kind);
  if (regime.kind != RegimeKind::RKLD) {
    const Corpus* active = &corpus;
    Corpus seqkd_local;
    if (regime.kind == RegimeKind::SEQ_KD) {
      if (prebuilt_seqkd) {
        active = prebuilt_seqkd;
      } else {
        std::vector<std::string> notes;
        seqkd_local = build_seqkd_corpus(*teacher, corpus, regime.seqkd_beam_width,
                                         GenerationBudget{kSeqKdMaxNewTokens, Tokenizer::kEos},
                                         &notes);
        for (const std::string& note : notes)
          std::fprintf(stderr, "[distaudit] seq_kd corpus: %s\n", note.c_str());
        active = &seqkd_local;
      }
      if (active->examples.empty()) throw ContractError("train: seq_kd corpus is empty");
    }

    TeacherCache cache;
    const TeacherCache* cache_ptr = nullptr;
    if (regime.kind == RegimeKind::WORD_KD && regime.word_kd_mix > 0.0) {
      cache = build_teacher_cache(teacher->params, *active);
      cache_ptr = &cache;
    }

    AdamState opt;
    opt.config.learning_rate = regime.learning_rate;
    for (int epoch = 0; epoch < regime.epochs; ++epoch) {
      const double mean =
          lm_epoch(model.params, *active, regime, cache_ptr,
                   derive_seed(regime.seed, kStreamEpochShuffle, epoch), opt, &model.loss_curve);
      epoch_note(phase.c_str(), epoch, regime.epochs, mean);
    }
    return model;
  }

  // RKLD: one supervised warm-start epoch, then on-policy steps.
  {
    AdamState warm;
    warm.config.learning_rate = regime.learning_rate;
    const double mean = lm_epoch(model.params, corpus, regime, nullptr,
                                 derive_seed(regime.seed, kStreamWarmShuffle), warm,
                                 &model.loss_curve);
    epoch_note("rkld warm-start", 0, 1, mean);
  }

  Tokenizer tok;
  std::vector<EncodedExample> encoded;
  encoded.reserve(corpus.examples.size());
  for (const Example& e : corpus.examples) encoded.push_back(encode_example(e, tok));

  AdamState opt;
  opt.config.learning_rate = regime.learning_rate;
  Rng rollout_rng = Rng(regime.seed).split(kStreamRollouts);
  for (int epoch = 0; epoch < regime.epochs; ++epoch) {
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(regime.seed, kStreamPromptOrder, epoch));
    order_rng.shuffle(order);

    std::vector<Batch> pt_batches;
    if (pretrain && !pretrain->examples.empty() && regime.rkld.pt_loss_weight > 0.0)
      pt_batches = make_batches(*pretrain, regime.batch_size,
                                derive_seed(regime.seed, kStreamPretrainShuffle, epoch));

    double loss_total = 0.0, kl_total = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += regime.batch_size) {
      const std::size_t stop = std::min(order.size(), start + regime.batch_size);
      std::vector<EncodedExample> prompts;
      prompts.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) prompts.push_back(encoded[order[i]]);
      const Batch* ptb =
          pt_batches.empty() ? nullptr : &pt_batches[steps % pt_batches.size()];
      const StepDiagnostics diag =
          rkld_step(model.params, teacher->params, prompts, ptb, regime, opt, rollout_rng);
      model.loss_curve.push_back(static_cast<float>(diag.loss));
      loss_total += diag.loss;
      kl_total += diag.kl_estimate;
      ++steps;
    }
    if (steps > 0)
      std::fprintf(stderr, "[distaudit] rkld epoch %d/%d loss %.4f kl %.4f\n", epoch + 1,
                   regime.epochs, loss_total / steps, kl_total / steps);
  }
  return model;
}

}  // namespace distaudit
