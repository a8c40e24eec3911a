#include "distaudit/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "distaudit/error.hpp"
#include "distaudit/rng.hpp"

namespace distaudit {

StepModel make_step_model(const TransformerParams& params) {
  StepModel m;
  m.max_seq_len = params.config.max_seq_len;
  m.next = [&params](std::span<const int> ids) {
    return detail::argmax_lowest(detail::next_token_logprobs(params, ids));
  };
  return m;
}

void AuditConfig::validate() const {
  if (k < 1) throw ConfigError("audit config: k must be >= 1");
  if (sample_size && *sample_size < 1)
    throw ConfigError("audit config: sample_size must be >= 1 when given");
}

std::pair<bool, int> exact_match(std::span<const int> generated, std::span<const int> target,
                                 int k) {
  if (target.empty()) throw ContractError("exact_match: target must not be empty");
  if (k < 1) throw ContractError("exact_match: k must be >= 1");
  const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(k), target.size());
  std::size_t prefix = 0;
  while (prefix < generated.size() && prefix < target.size() &&
         generated[prefix] == target[prefix])
    prefix += 1;
  const bool matched = generated.size() >= m && prefix >= m;
  return {matched, static_cast<int>(prefix)};
}

AuditReport memorization_fraction(const StepModel& model, const Corpus& corpus,
                                  const AuditConfig& cfg) {
  cfg.validate();
  if (corpus.examples.empty())
    throw ContractError("memorization_fraction: corpus must not be empty");
  if (!model.next) throw ContractError("memorization_fraction: model has no next-token hook");

  std::vector<std::size_t> indices(corpus.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  if (cfg.sample_size && *cfg.sample_size < indices.size()) {
    Rng rng(cfg.seed);
    rng.shuffle(indices);
    indices.resize(*cfg.sample_size);
    std::sort(indices.begin(), indices.end());
  }

  Tokenizer tok;
  AuditReport report;
  for (std::size_t idx : indices) {
    const EncodedExample enc = encode_example(corpus.examples[idx], tok);
    const std::size_t target_len = enc.target_ids.size();
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(cfg.k), target_len);
    const std::size_t prompt_len = enc.prompt_ids.size();
    if (prompt_len + m > static_cast<std::size_t>(model.max_seq_len)) {
      report.n_skipped += 1;
      continue;
    }
    const std::size_t budget =
        std::min(target_len, static_cast<std::size_t>(model.max_seq_len) - prompt_len);

    // Fused greedy decode + match: generate while the prefix still matches
    // the target; the first divergence or stop freezes both outputs.
    std::vector<int> ids = enc.prompt_ids;
    std::size_t prefix = 0;
    for (std::size_t t = 0; t < budget; ++t) {
      const int next = model.next(ids);
      if (next == Tokenizer::kEos) break;
      if (next != enc.target_ids[t]) break;
      prefix += 1;
      ids.push_back(next);
    }
    const bool matched = prefix >= m;
    report.records.push_back({idx, matched, static_cast<int>(prefix)});
    report.n_evaluated += 1;
    if (matched) report.n_memorized += 1;
  }
  if (report.n_evaluated == 0)
    throw ContractError("memorization_fraction: every example was skipped");
  report.fraction =
      static_cast<double>(report.n_memorized) / static_cast<double>(report.n_evaluated);
  return report;
}

std::vector<std::string> rouge_tokenize(const std::string& text) {
  std::vector<std::string> toks;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) toks.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) toks.push_back(std::move(cur));
  return toks;
}

namespace {

// Interns string tokens so LCS and n-gram work runs on ints.
std::vector<int> intern(const std::vector<std::string>& toks,
                        std::map<std::string, int>& table) {
  std::vector<int> ids;
  ids.reserve(toks.size());
  for (const auto& t : toks) {
    auto [it, _] = table.emplace(t, static_cast<int>(table.size()));
    ids.push_back(it->second);
  }
  return ids;
}

}  // namespace

double rouge_n(const std::string& reference, const std::string& candidate, int n) {
  if (n < 1) throw ContractError("rouge_n: n must be >= 1");
  const std::vector<std::string> ref = rouge_tokenize(reference);
  const std::vector<std::string> cand = rouge_tokenize(candidate);
  if (ref.size() < static_cast<std::size_t>(n)) return 0.0;

  std::map<std::vector<std::string>, std::pair<int, int>> counts;  // gram -> (ref, cand)
  for (std::size_t i = 0; i + n <= ref.size(); ++i)
    counts[{ref.begin() + i, ref.begin() + i + n}].first += 1;
  for (std::size_t i = 0; i + n <= cand.size(); ++i) {
    auto it = counts.find({cand.begin() + i, cand.begin() + i + n});
    if (it != counts.end()) it->second.second += 1;
  }
  long matched = 0;
  long total = 0;
  for (const auto& [gram, rc] : counts) {
    matched += std::min(rc.first, rc.second);
    total += rc.first;
  }
  return static_cast<double>(matched) / static_cast<double>(total);
}

int lcs_length(std::span<const int> xs, std::span<const int> ys) {
  const std::size_t n = xs.size(), m = ys.size();
  if (n == 0 || m == 0) return 0;
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      if (xs[i - 1] == ys[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

int lcs_length(const std::vector<std::string>& xs, const std::vector<std::string>& ys) {
  std::map<std::string, int> table;
  const std::vector<int> a = intern(xs, table);
  const std::vector<int> b = intern(ys, table);
  return lcs_length(std::span<const int>(a), std::span<const int>(b));
}

double rouge_l(const std::string& reference, const std::string& candidate, double beta) {
  if (!(beta > 0.0)) throw ContractError("rouge_l: beta must be positive");
  const std::vector<std::string> ref = rouge_tokenize(reference);
  const std::vector<std::string> cand = rouge_tokenize(candidate);
  if (ref.empty() || cand.empty()) return 0.0;
  const int lcs = lcs_length(ref, cand);
  if (lcs == 0) return 0.0;
  const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
  const double p = static_cast<double>(lcs) / static_cast<double>(cand.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

namespace {

struct SplitScores {
  double r1 = 0.0, r2 = 0.0, rl = 0.0;
  std::size_t n = 0;
};

SplitScores score_split(const StepModel& model, const Corpus& corpus, const Tokenizer& tok) {
  SplitScores s;
  for (const Example& e : corpus.examples) {
    const EncodedExample enc = encode_example(e, tok);
    const std::size_t prompt_len = enc.prompt_ids.size();
    const std::size_t target_len = enc.target_ids.size();
    if (prompt_len + target_len > static_cast<std::size_t>(model.max_seq_len)) continue;
    std::vector<int> ids = enc.prompt_ids;
    std::vector<int> gen;
    for (std::size_t t = 0; t < target_len; ++t) {
      const int next = model.next(ids);
      if (next == Tokenizer::kEos) break;
      ids.push_back(next);
      gen.push_back(next);
    }
    const std::string text = tok.decode(gen);
    s.r1 += rouge_n(e.response, text, 1);
    s.r2 += rouge_n(e.response, text, 2);
    s.rl += rouge_l(e.response, text);
    s.n += 1;
  }
  if (s.n == 0) throw ContractError("rouge_report: every example in a split was skipped");
  s.r1 /= static_cast<double>(s.n);
  s.r2 /= static_cast<double>(s.n);
  s.rl /= static_cast<double>(s.n);
  return s;
}

}  // namespace

RougeReport rouge_report(const StepModel& model, const Corpus& train_sample,
                         const Corpus& test_sample) {
  if (train_sample.examples.empty() || test_sample.examples.empty())
    throw ContractError("rouge_report: samples must not be empty");
  Tokenizer tok;
  const SplitScores tr = score_split(model, train_sample, tok);
  const SplitScores te = score_split(model, test_sample, tok);
  RougeReport r;
  r.rouge1_train = tr.r1;
  r.rouge2_train = tr.r2;
  r.rougeL_train = tr.rl;
  r.rouge1_test = te.r1;
  r.rouge2_test = te.r2;
  r.rougeL_test = te.rl;
  r.n_train = tr.n;
  r.n_test = te.n;
  return r;
}

}  // namespace distaudit
