#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "distaudit/metrics.hpp"
#include "distaudit/rng.hpp"

using namespace distaudit;

namespace {

std::shared_ptr<std::vector<EncodedExample>> encode_all(const Corpus& corpus) {
  Tokenizer tok;
  auto encs = std::make_shared<std::vector<EncodedExample>>();
  for (const Example& e : corpus.examples) encs->push_back(encode_example(e, tok));
  return encs;
}

// Locates which example a prefix belongs to; distinct instructions make the
// prompts prefix-free, so the match is unique.
int find_prompt(const std::vector<EncodedExample>& encs, std::span<const int> ids) {
  for (std::size_t j = 0; j < encs.size(); ++j) {
    const auto& p = encs[j].prompt_ids;
    if (ids.size() >= p.size() && std::equal(p.begin(), p.end(), ids.begin()))
      return static_cast<int>(j);
  }
  return -1;
}

// Reproduces each target exactly, then stops.
StepModel echo_model(const Corpus& corpus, int max_len = 256) {
  auto encs = encode_all(corpus);
  StepModel m;
  m.max_seq_len = max_len;
  m.next = [encs](std::span<const int> ids) {
    const int j = find_prompt(*encs, ids);
    if (j < 0) return static_cast<int>(Tokenizer::kPad);
    const auto& enc = (*encs)[j];
    const std::size_t done = ids.size() - enc.prompt_ids.size();
    return done < enc.target_ids.size() ? enc.target_ids[done]
                                        : static_cast<int>(Tokenizer::kEos);
  };
  return m;
}

StepModel pad_model(int max_len = 256) {
  StepModel m;
  m.max_seq_len = max_len;
  m.next = [](std::span<const int>) { return static_cast<int>(Tokenizer::kPad); };
  return m;
}

// Example j echoes its first j target tokens, then emits padding forever.
StepModel partial_echo_model(const Corpus& corpus) {
  auto encs = encode_all(corpus);
  StepModel m;
  m.next = [encs](std::span<const int> ids) {
    const int j = find_prompt(*encs, ids);
    if (j < 0) return static_cast<int>(Tokenizer::kPad);
    const auto& enc = (*encs)[j];
    const std::size_t done = ids.size() - enc.prompt_ids.size();
    if (done < static_cast<std::size_t>(j) && done < enc.target_ids.size())
      return enc.target_ids[done];
    return static_cast<int>(Tokenizer::kPad);
  };
  return m;
}

// Deterministic pseudo-random next token; any prefix maps to a fixed draw.
StepModel hash_model() {
  StepModel m;
  m.next = [](std::span<const int> ids) {
    std::uint64_t h = 1469598103934665603ull;
    for (int id : ids) {
      h ^= static_cast<std::uint64_t>(id);
      h *= 1099511628211ull;
    }
    return static_cast<int>(h % 260);
  };
  return m;
}

std::string random_words(Rng& rng, std::size_t max_len) {
  static const char* kWords[] = {"a", "b", "c", "d", "e"};
  const std::size_t len = rng.below(max_len + 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    if (!s.empty()) s.push_back(' ');
    s += kWords[rng.below(5)];
  }
  return s;
}

// Clipped n-gram recall written the long way: per distinct reference gram,
// count occurrences on both sides and take the minimum.
double rouge_n_reference(const std::string& reference, const std::string& candidate, int n) {
  const auto ref = rouge_tokenize(reference);
  const auto cand = rouge_tokenize(candidate);
  if (ref.size() < static_cast<std::size_t>(n)) return 0.0;
  auto gram_at = [n](const std::vector<std::string>& xs, std::size_t i) {
    return std::vector<std::string>(xs.begin() + i, xs.begin() + i + n);
  };
  const std::size_t nref = ref.size() - n + 1;
  long matched = 0;
  for (std::size_t i = 0; i < nref; ++i) {
    const auto g = gram_at(ref, i);
    bool seen_before = false;
    for (std::size_t j = 0; j < i; ++j)
      if (gram_at(ref, j) == g) seen_before = true;
    if (seen_before) continue;
    long r = 0, c = 0;
    for (std::size_t j = 0; j < nref; ++j)
      if (gram_at(ref, j) == g) ++r;
    for (std::size_t j = 0; j + n <= cand.size(); ++j)
      if (gram_at(cand, j) == g) ++c;
    matched += std::min(r, c);
  }
  return static_cast<double>(matched) / static_cast<double>(nref);
}

int lcs_reference(std::span<const int> xs, std::span<const int> ys) {
  if (xs.empty() || ys.empty()) return 0;
  if (xs.back() == ys.back())
    return lcs_reference(xs.first(xs.size() - 1), ys.first(ys.size() - 1)) + 1;
  return std::max(lcs_reference(xs.first(xs.size() - 1), ys),
                  lcs_reference(xs, ys.first(ys.size() - 1)));
}

}  // namespace

TEST_CASE("exact_match: hand cases") {
  const std::vector<int> target{10, 20, 30, 40};

  auto [m1, p1] = exact_match(target, target, 50);
  CHECK(m1);
  CHECK(p1 == 4);

  const std::vector<int> diverge{10, 20, 99, 40};
  auto [m2, p2] = exact_match(diverge, target, 2);
  CHECK(m2);
  CHECK(p2 == 2);
  auto [m3, p3] = exact_match(diverge, target, 3);
  CHECK(!m3);
  CHECK(p3 == 2);

  const std::vector<int> short_gen{10, 20};
  auto [m4, p4] = exact_match(short_gen, target, 50);
  CHECK(!m4);
  CHECK(p4 == 2);
  auto [m5, p5] = exact_match(short_gen, target, 2);
  CHECK(m5);
  CHECK(p5 == 2);

  const std::vector<int> wrong{99};
  auto [m6, p6] = exact_match(wrong, target, 1);
  CHECK(!m6);
  CHECK(p6 == 0);

  const std::vector<int> empty;
  auto [m7, p7] = exact_match(empty, target, 1);
  CHECK(!m7);
  CHECK(p7 == 0);
  CHECK_THROWS_AS(exact_match(target, empty, 1), ContractError);
  CHECK_THROWS_AS(exact_match(target, target, 0), ContractError);
}

TEST_CASE("exact_match: once failed at some k, failed for all larger k") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t tlen = 1 + rng.below(12);
    std::vector<int> target(tlen);
    for (int& t : target) t = static_cast<int>(rng.below(5));
    const std::size_t keep = rng.below(tlen + 1);
    std::vector<int> gen(target.begin(), target.begin() + keep);
    const std::size_t tail = rng.below(4);
    for (std::size_t i = 0; i < tail; ++i) gen.push_back(static_cast<int>(5 + rng.below(3)));

    bool prev = true;
    for (int k = 1; k <= static_cast<int>(tlen) + 2; ++k) {
      const bool now = exact_match(gen, target, k).first;
      if (!prev) CHECK(!now);
      prev = now;
    }
  }
}

TEST_CASE("audit: an echoing model is scored as fully memorized") {
  const Corpus corpus = synth_corpus(10, 64);
  const StepModel model = echo_model(corpus);
  Tokenizer tok;
  for (int k : {1, 8, 50}) {
    AuditConfig cfg;
    cfg.k = k;
    const AuditReport rep = memorization_fraction(model, corpus, cfg);
    CHECK(rep.fraction == 1.0);
    CHECK(rep.n_evaluated == 10);
    CHECK(rep.n_memorized == 10);
    CHECK(rep.n_skipped == 0);
    REQUIRE(rep.records.size() == 10);
    for (const MatchRecord& r : rep.records) {
      CHECK(r.matched);
      const auto enc = encode_example(corpus.examples[r.example_index], tok);
      CHECK(r.matched_prefix_len == static_cast<int>(enc.target_ids.size()));
    }
  }
}

TEST_CASE("audit: a padding model is scored as zero") {
  const Corpus corpus = synth_corpus(10, 65);
  AuditConfig cfg;
  const AuditReport rep = memorization_fraction(pad_model(), corpus, cfg);
  CHECK(rep.fraction == 0.0);
  CHECK(rep.n_memorized == 0);
  for (const MatchRecord& r : rep.records) {
    CHECK(!r.matched);
    CHECK(r.matched_prefix_len == 0);
  }
}

TEST_CASE("audit: partial echoes make the fraction fall as k grows") {
  const Corpus corpus = synth_corpus(10, 66);
  const StepModel model = partial_echo_model(corpus);
  Tokenizer tok;
  double prev = 2.0;
  for (int k : {1, 2, 4, 8, 64}) {
    AuditConfig cfg;
    cfg.k = k;
    const AuditReport rep = memorization_fraction(model, corpus, cfg);

    std::size_t expect = 0;
    for (std::size_t j = 0; j < corpus.size(); ++j) {
      const auto enc = encode_example(corpus.examples[j], tok);
      const std::size_t tlen = enc.target_ids.size();
      const std::size_t prefix = std::min<std::size_t>(j, tlen);
      if (prefix >= std::min<std::size_t>(static_cast<std::size_t>(k), tlen)) expect += 1;
    }
    CHECK(rep.n_memorized == expect);
    CHECK(rep.fraction <= prev);
    prev = rep.fraction;
  }
}

TEST_CASE("audit: fused scan equals decode-then-match") {
  const Corpus corpus = synth_corpus(20, 67);
  const StepModel model = hash_model();
  const int k = 8;
  AuditConfig cfg;
  cfg.k = k;
  const AuditReport rep = memorization_fraction(model, corpus, cfg);
  REQUIRE(rep.records.size() == 20);

  Tokenizer tok;
  for (const MatchRecord& r : rep.records) {
    const EncodedExample enc = encode_example(corpus.examples[r.example_index], tok);
    const std::size_t budget =
        std::min(enc.target_ids.size(),
                 static_cast<std::size_t>(model.max_seq_len) - enc.prompt_ids.size());
    std::vector<int> ids = enc.prompt_ids;
    std::vector<int> gen;
    for (std::size_t t = 0; t < budget; ++t) {
      const int next = model.next(ids);
      if (next == Tokenizer::kEos) break;
      ids.push_back(next);
      gen.push_back(next);
    }
    const auto [matched, prefix] = exact_match(gen, enc.target_ids, k);
    CHECK(r.matched == matched);
    CHECK(r.matched_prefix_len == prefix);
  }
}

TEST_CASE("audit: sampling is seeded and skips stay out of the denominator") {
  const Corpus corpus = synth_corpus(10, 68);
  AuditConfig cfg;
  cfg.sample_size = 4;
  cfg.seed = 3;
  const StepModel model = echo_model(corpus);
  const AuditReport a = memorization_fraction(model, corpus, cfg);
  const AuditReport b = memorization_fraction(model, corpus, cfg);
  CHECK(a.n_evaluated == 4);
  REQUIRE(a.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.records[i].example_index == b.records[i].example_index);
    if (i > 0) CHECK(a.records[i].example_index > a.records[i - 1].example_index);
  }

  // A tight context window knocks out exactly the long prompts.
  Tokenizer tok;
  Corpus uneven;
  uneven.examples = {
      {"hi", "", "response one"},
      {"yo", "", "response two"},
      {std::string(60, 'q'), "", "response three"}};
  const int window = 60;
  AuditConfig small;
  small.k = 4;
  REQUIRE(encode_example(uneven.examples[0], tok).prompt_ids.size() + 4 <= 60);
  REQUIRE(encode_example(uneven.examples[2], tok).prompt_ids.size() + 4 > 60);
  const AuditReport c = memorization_fraction(echo_model(uneven, window), uneven, small);
  CHECK(c.n_skipped == 1);
  CHECK(c.n_evaluated == 2);
  CHECK(c.fraction == 1.0);
  for (const MatchRecord& r : c.records) CHECK(r.example_index < 2);

  CHECK_THROWS_AS(memorization_fraction(echo_model(uneven, 10), uneven, small), ContractError);
}

TEST_CASE("audit: contract violations") {
  const Corpus corpus = synth_corpus(2, 69);
  const StepModel model = echo_model(corpus);
  AuditConfig cfg;
  CHECK_THROWS_AS(memorization_fraction(model, Corpus{}, cfg), ContractError);
  CHECK_THROWS_AS(memorization_fraction(StepModel{}, corpus, cfg), ContractError);
  AuditConfig bad_k;
  bad_k.k = 0;
  CHECK_THROWS_AS(memorization_fraction(model, corpus, bad_k), ConfigError);
  AuditConfig bad_sample;
  bad_sample.sample_size = 0;
  CHECK_THROWS_AS(memorization_fraction(model, corpus, bad_sample), ConfigError);
}

TEST_CASE("step model over real parameters matches greedy decoding") {
  const ModelConfig c = arch_config("S-S");
  const TransformerParams params = init_params<float>(c, 55);
  const StepModel step = make_step_model(params);
  CHECK(step.max_seq_len == c.max_seq_len);

  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> prompt(1 + rng.below(6));
    for (int& t : prompt) t = static_cast<int>(rng.below(260));
    const GenerationBudget budget{6, Tokenizer::kEos};
    const std::vector<int> want = greedy_decode(params, prompt, budget);

    std::vector<int> ids = prompt;
    std::vector<int> got;
    for (int t = 0; t < 6; ++t) {
      const int next = step.next(ids);
      if (next == Tokenizer::kEos) break;
      ids.push_back(next);
      got.push_back(next);
    }
    CHECK(got == want);
  }
}

TEST_CASE("rouge_n: hand values") {
  CHECK(rouge_n("the cat sat", "the cat", 1) == doctest::Approx(2.0 / 3.0));
  CHECK(rouge_n("a b c d", "a b c x", 2) == doctest::Approx(2.0 / 3.0));
  CHECK(rouge_n("a a b", "a a a a", 1) == doctest::Approx(2.0 / 3.0));
  CHECK(rouge_n("The CAT", "the cat", 1) == doctest::Approx(1.0));
  CHECK(rouge_n("cat.", "cat", 1) == doctest::Approx(0.0));
  CHECK(rouge_n("one", "one two", 2) == 0.0);
  CHECK(rouge_n("one two", "", 1) == 0.0);
  CHECK(rouge_n("", "anything", 1) == 0.0);
  CHECK_THROWS_AS(rouge_n("a", "a", 0), ContractError);
}

TEST_CASE("rouge_n: agrees with a long-hand recount on random pairs") {
  Rng rng(71);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string ref = random_words(rng, 8);
    const std::string cand = random_words(rng, 8);
    const int n = 1 + static_cast<int>(rng.below(3));
    CHECK(rouge_n(ref, cand, n) == rouge_n_reference(ref, cand, n));
  }
}

TEST_CASE("lcs_length: hand values and a recursive cross-check") {
  const std::vector<int> a{1, 2, 3, 4, 5};
  const std::vector<int> b{1, 3, 5};
  CHECK(lcs_length(std::span<const int>(a), std::span<const int>(b)) == 3);
  CHECK(lcs_length(std::span<const int>(a), std::span<const int>(a)) == 5);
  const std::vector<int> c{9, 8};
  CHECK(lcs_length(std::span<const int>(a), std::span<const int>(c)) == 0);
  const std::vector<int> none;
  CHECK(lcs_length(std::span<const int>(a), std::span<const int>(none)) == 0);

  CHECK(lcs_length(std::vector<std::string>{"a", "b", "c", "d", "e"},
                   std::vector<std::string>{"a", "c", "e"}) == 3);

  Rng rng(72);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> xs(rng.below(9)), ys(rng.below(9));
    for (int& x : xs) x = static_cast<int>(rng.below(3));
    for (int& y : ys) y = static_cast<int>(rng.below(3));
    CHECK(lcs_length(std::span<const int>(xs), std::span<const int>(ys)) ==
          lcs_reference(xs, ys));
  }
}

TEST_CASE("rouge_l: hand values, symmetry at beta one") {
  CHECK(rouge_l("a b c d e", "a c e") == doctest::Approx(0.75));
  CHECK(rouge_l("same words here", "same words here") == doctest::Approx(1.0));
  CHECK(rouge_l("a b", "c d") == 0.0);
  CHECK(rouge_l("a b", "") == 0.0);
  CHECK(rouge_l("", "a b") == 0.0);
  CHECK_THROWS_AS(rouge_l("a", "a", 0.0), ContractError);

  // beta = 1 is plain F1, symmetric under swapping the two sides.
  Rng rng(73);
  for (int trial = 0; trial < 100; ++trial) {
    const std::string x = random_words(rng, 8);
    const std::string y = random_words(rng, 8);
    CHECK(rouge_l(x, y) == rouge_l(y, x));
  }

  // Recall-weighted variant, worked by hand: lcs 3, r 3/5, p 1.
  const double b2 = 4.0;
  const double want = (1.0 + b2) * 0.6 * 1.0 / (0.6 + b2 * 1.0);
  CHECK(rouge_l("a b c d e", "a c e", 2.0) == doctest::Approx(want));
}

TEST_CASE("rouge_tokenize: lowercase, whitespace-delimited") {
  CHECK(rouge_tokenize("  The\tCAT  sat\n") ==
        std::vector<std::string>{"the", "cat", "sat"});
  CHECK(rouge_tokenize("").empty());
  CHECK(rouge_tokenize("   \t\n ").empty());
  CHECK(rouge_tokenize("Hello, World!") == std::vector<std::string>{"hello,", "world!"});
}

TEST_CASE("rouge_report: echoes score one, padding scores zero") {
  const Corpus train = synth_corpus(5, 80);
  const Corpus test = synth_corpus(5, 81);
  Corpus both;
  both.examples = train.examples;
  both.examples.insert(both.examples.end(), test.examples.begin(), test.examples.end());

  const RougeReport full = rouge_report(echo_model(both), train, test);
  CHECK(full.rouge1_train == doctest::Approx(1.0));
  CHECK(full.rouge2_train == doctest::Approx(1.0));
  CHECK(full.rougeL_train == doctest::Approx(1.0));
  CHECK(full.rouge1_test == doctest::Approx(1.0));
  CHECK(full.n_train == 5);
  CHECK(full.n_test == 5);

  const RougeReport none = rouge_report(pad_model(), train, test);
  CHECK(none.rouge1_train == 0.0);
  CHECK(none.rouge2_test == 0.0);
  CHECK(none.rougeL_train == 0.0);

  CHECK_THROWS_AS(rouge_report(pad_model(), Corpus{}, test), ContractError);
  CHECK_THROWS_AS(rouge_report(pad_model(10), train, test), ContractError);
}
