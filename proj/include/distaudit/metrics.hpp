#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distaudit/data.hpp"
#include "distaudit/decode.hpp"
#include "distaudit/model.hpp"

namespace distaudit {

// Minimal next-token interface the auditors run against: a function mapping
// a token prefix to the model's greedy next token, plus the context limit.
// Production models wrap forward_logits; tests plug in stubs.
struct StepModel {
  std::function<int(std::span<const int>)> next;
  int max_seq_len = 256;
};

// Greedy argmax adapter over a transformer. The parameters must outlive the
// returned StepModel.
StepModel make_step_model(const TransformerParams& params);

struct AuditConfig {
  int k = 50;
  std::optional<std::size_t> sample_size;  // audit everything when absent
  std::uint64_t seed = 0;

  void validate() const;
};

struct MatchRecord {
  std::size_t example_index = 0;
  bool matched = false;
  int matched_prefix_len = 0;
};

struct AuditReport {
  double fraction = 0.0;
  std::size_t n_evaluated = 0;
  std::size_t n_memorized = 0;
  std::size_t n_skipped = 0;  // prompts too long to audit, excluded from the denominator
  std::vector<MatchRecord> records;
};

// Verbatim-prefix match: with m = min(k, len(target)), matched holds when
// the first m generated tokens equal the target's first m and at least m
// tokens were generated. matched_prefix_len is the longest common prefix.
std::pair<bool, int> exact_match(std::span<const int> generated, std::span<const int> target,
                                 int k);

// The memorization audit: for each (sampled) example, render the prompt,
// greedy-decode with max_new_tokens = len(encode(response)), and apply
// exact_match. Generation stops early once the outcome of both report
// fields is determined (first divergence), which cannot change the result.
AuditReport memorization_fraction(const StepModel& model, const Corpus& corpus,
                                  const AuditConfig& cfg);

// Recall-oriented clipped n-gram overlap, single reference. Tokenization is
// lowercase + whitespace split. Returns 0 when the reference has no n-grams.
double rouge_n(const std::string& reference, const std::string& candidate, int n);

// F-measure over the longest common subsequence. Returns 0 when either side
// is empty or the LCS is empty.
double rouge_l(const std::string& reference, const std::string& candidate, double beta = 1.0);

int lcs_length(std::span<const int> xs, std::span<const int> ys);
int lcs_length(const std::vector<std::string>& xs, const std::vector<std::string>& ys);

// Lowercase + whitespace-split tokenization used by the ROUGE scorers.
std::vector<std::string> rouge_tokenize(const std::string& text);

struct RougeReport {
  double rouge1_train = 0.0, rouge2_train = 0.0, rougeL_train = 0.0;
  double rouge1_test = 0.0, rouge2_test = 0.0, rougeL_test = 0.0;
  std::size_t n_train = 0, n_test = 0;
};

// Greedy-decodes every sampled example (budget = its gold target length),
// detokenizes, and averages ROUGE-1/2/L against the gold responses.
RougeReport rouge_report(const StepModel& model, const Corpus& train_sample,
                         const Corpus& test_sample);

}  // namespace distaudit
