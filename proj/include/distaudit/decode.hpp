#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "distaudit/model.hpp"
#include "distaudit/ops.hpp"
#include "distaudit/rng.hpp"

namespace distaudit {

// Decode budget: how many tokens may be generated and which id terminates.
// Generation also stops when the context window fills, whichever comes
// first; the stop token is never part of the returned tokens.
struct GenerationBudget {
  int max_new_tokens = 1;
  int stop_token = 257;

  void validate(int vocab_size) const {
    if (max_new_tokens < 1) throw ConfigError("budget: max_new_tokens must be >= 1");
    if (stop_token < 0 || stop_token >= vocab_size)
      throw ConfigError("budget: stop_token outside the vocabulary");
  }
};

// The decode routines are generic over the model: anything with a .config
// (ModelConfig) and a forward_logits(tape, model, ids) overload works, which
// lets tests drive them with hand-built stub distributions.

namespace detail {

template <typename Model>
int effective_budget(const Model& model, std::size_t prompt_len, const GenerationBudget& budget) {
  budget.validate(model.config.vocab_size);
  if (prompt_len == 0) throw ContractError("decode: prompt must not be empty");
  if (prompt_len > static_cast<std::size_t>(model.config.max_seq_len))
    throw LengthError("decode: prompt longer than max_seq_len");
  const int room = model.config.max_seq_len - static_cast<int>(prompt_len);
  return std::min(budget.max_new_tokens, room);
}

// Log-softmax of the final logits row, as doubles.
template <typename Model>
std::vector<double> next_token_logprobs(Model& model, std::span<const int> ids) {
  auto logits = forward_logits(nullptr, model, ids);
  const int V = logits.shape[1];
  return log_softmax_values(logits.ptr() + static_cast<std::size_t>(logits.shape[0] - 1) * V, V);
}

// Strict-greater argmax, so equal scores resolve to the lowest id.
inline int argmax_lowest(const std::vector<double>& xs) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(xs.size()); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

}  // namespace detail

// Deterministic greedy decoding. Ties in the next-token distribution are
// broken toward the lowest token id.
template <typename Model>
std::vector<int> greedy_decode(Model& model, std::span<const int> prompt,
                               const GenerationBudget& budget) {
  const int B = detail::effective_budget(model, prompt.size(), budget);
  std::vector<int> ids(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int step = 0; step < B; ++step) {
    const int next = detail::argmax_lowest(detail::next_token_logprobs(model, ids));
    if (next == budget.stop_token) break;
    ids.push_back(next);
    out.push_back(next);
  }
  return out;
}

struct SampleResult {
  std::vector<int> tokens;
  bool stopped = false;  // true when the stop token was drawn
};

// Ancestral sampling from the model distribution. The categorical draw
// walks the cumulative distribution in id order, so the outcome depends
// only on the rng stream.
template <typename Model>
SampleResult sample_decode(Model& model, std::span<const int> prompt,
                           const GenerationBudget& budget, Rng& rng) {
  const int B = detail::effective_budget(model, prompt.size(), budget);
  std::vector<int> ids(prompt.begin(), prompt.end());
  SampleResult res;
  for (int step = 0; step < B; ++step) {
    const std::vector<double> lp = detail::next_token_logprobs(model, ids);
    double total = 0.0;
    for (double l : lp) total += std::exp(l);
    const double u = rng.next_double() * total;
    double cum = 0.0;
    int next = static_cast<int>(lp.size()) - 1;
    for (int k = 0; k < static_cast<int>(lp.size()); ++k) {
      cum += std::exp(lp[k]);
      if (cum > u) {
        next = k;
        break;
      }
    }
    if (next == budget.stop_token) {
      res.stopped = true;
      break;
    }
    ids.push_back(next);
    res.tokens.push_back(next);
  }
  return res;
}

// Log-probability of a continuation given the prompt, summed in double.
// When include_stop is set, the stop token's log-probability after the
// continuation is added too. One forward pass.
template <typename Model>
double sequence_logprob(Model& model, std::span<const int> prompt,
                        std::span<const int> continuation, bool include_stop, int stop_token) {
  if (prompt.empty()) throw ContractError("sequence_logprob: prompt must not be empty");
  std::vector<int> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), continuation.begin(), continuation.end());
  auto logits = forward_logits(nullptr, model, ids);
  const int V = logits.shape[1];
  const int P = static_cast<int>(prompt.size());
  double total = 0.0;
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const auto lp =
        log_softmax_values(logits.ptr() + (static_cast<std::size_t>(P) - 1 + t) * V, V);
    total += lp[continuation[t]];
  }
  if (include_stop) {
    const auto lp = log_softmax_values(logits.ptr() + (ids.size() - 1) * V, V);
    total += lp[stop_token];
  }
  return total;
}

// Beam search over full next-token expansions. Hypotheses are scored by
// total log-probability with no length normalization. The stop token
// competes for a beam slot like any other expansion; a hypothesis finishes
// only when its stop extension survives selection, which makes beam width
// one reproduce greedy decoding exactly. A finished hypothesis banks its
// score including the stop log-probability. The greedy trajectory is scored
// and seeded into the finished pool, so the winner never scores below
// greedy. Ties resolve to the lexicographically smallest token sequence.
// Expansion continues while some live hypothesis still ties or beats the
// best banked score.
template <typename Model>
std::vector<int> beam_search_decode(Model& model, std::span<const int> prompt, int beam_width,
                                    const GenerationBudget& budget) {
  if (beam_width < 1) throw ConfigError("beam search: beam_width must be >= 1");
  const int B = detail::effective_budget(model, prompt.size(), budget);
  if (B <= 0) return {};

  struct Hyp {
    std::vector<int> toks;
    double score = 0.0;
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::lexicographical_compare(a.toks.begin(), a.toks.end(), b.toks.begin(),
                                        b.toks.end());
  };

  std::vector<Hyp> finished;
  {
    std::vector<int> g = greedy_decode(model, prompt, budget);
    const bool stopped = static_cast<int>(g.size()) < B;
    const double gs = sequence_logprob(model, prompt, g, stopped, budget.stop_token);
    finished.push_back({std::move(g), gs});
  }

  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<int> ids(prompt.begin(), prompt.end());
  for (int depth = 0; depth < B && !live.empty(); ++depth) {
    double best_finished = finished.front().score;
    for (const auto& h : finished) best_finished = std::max(best_finished, h.score);
    double best_live = live.front().score;
    for (const auto& h : live) best_live = std::max(best_live, h.score);
    if (best_live < best_finished) break;

    std::vector<Hyp> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(model.config.vocab_size));
    for (const auto& h : live) {
      ids.resize(prompt.size());
      ids.insert(ids.end(), h.toks.begin(), h.toks.end());
      const std::vector<double> lp = detail::next_token_logprobs(model, ids);
      for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
        Hyp ext{h.toks, h.score + lp[tok]};
        ext.toks.push_back(tok);
        cands.push_back(std::move(ext));
      }
    }
    std::sort(cands.begin(), cands.end(), better);
    if (static_cast<int>(cands.size()) > beam_width) cands.resize(beam_width);
    live.clear();
    for (auto& c : cands) {
      if (!c.toks.empty() && c.toks.back() == budget.stop_token) {
        c.toks.pop_back();
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }
  // Hypotheses alive at the budget boundary compete as they stand.
  for (auto& h : live) finished.push_back(std::move(h));

  const Hyp* best = &finished.front();
  for (const auto& h : finished)
    if (better(h, *best)) best = &h;
  return best->toks;
}

}  // namespace distaudit
