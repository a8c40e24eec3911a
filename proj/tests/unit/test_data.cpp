#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "distaudit/data.hpp"
#include "distaudit/rng.hpp"
#include "distaudit/tokenizer.hpp"

using namespace distaudit;

namespace {

std::string random_bytes(Rng& rng, std::size_t len) {
  std::string s;
  s.reserve(len);
  for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.below(256)));
  return s;
}

struct TempFile {
  std::filesystem::path path;
  explicit TempFile(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
  }
  ~TempFile() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("tokenizer: every byte string round-trips") {
  Tokenizer tok;
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string s = random_bytes(rng, rng.below(65));
    const std::vector<int> ids = tok.encode(s);
    CHECK(ids.size() == s.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      CHECK(ids[i] >= 0);
      CHECK(ids[i] < 256);
    }
    CHECK(tok.decode(ids) == s);
  }
  CHECK(tok.encode("Ab") == std::vector<int>{65, 98});
  CHECK(tok.encode("\xff") == std::vector<int>{255});
  CHECK(tok.encode("").empty());
}

TEST_CASE("tokenizer: specials decode to visible markers") {
  Tokenizer tok;
  const std::vector<int> ids{Tokenizer::kBos, 65, Tokenizer::kSep, Tokenizer::kEos,
                             Tokenizer::kPad};
  CHECK(tok.decode(ids) == "<|bos|>A<|sep|><|eos|><|pad|>");
  CHECK(Tokenizer::kVocabSize == 260);
  CHECK(Tokenizer::kBos == 256);
  CHECK(Tokenizer::kEos == 257);
  CHECK(Tokenizer::kSep == 258);
  CHECK(Tokenizer::kPad == 259);
  CHECK_THROWS_AS(tok.decode(std::vector<int>{260}), VocabError);
  CHECK_THROWS_AS(tok.decode(std::vector<int>{-1}), VocabError);
}

TEST_CASE("render_prompt: exact template, context block only when present") {
  Example with_ctx{"Summarize the log entry.", "Entry AB-12: the rotor cools.", "It cools."};
  const auto [p1, r1] = render_prompt(with_ctx);
  CHECK(p1 ==
        "### Instruction:\nSummarize the log entry.\n\n"
        "### Context:\nEntry AB-12: the rotor cools.\n\n"
        "### Response:\n");
  CHECK(r1 == "It cools.");

  Example no_ctx{"What does the relay do?", "", "It routes."};
  const auto [p2, r2] = render_prompt(no_ctx);
  CHECK(p2 == "### Instruction:\nWhat does the relay do?\n\n### Response:\n");
  CHECK(r2 == "It routes.");
}

TEST_CASE("render_prompt: distinct pairs render distinctly") {
  const Corpus corpus = synth_corpus(100, 77);
  std::set<std::string> prompts;
  for (const Example& e : corpus.examples) prompts.insert(render_prompt(e).first);
  CHECK(prompts.size() == corpus.size());
}

TEST_CASE("encode_example: frame tokens and payload bytes") {
  Tokenizer tok;
  Example e{"ab", "", "xyz"};
  const EncodedExample enc = encode_example(e, tok);
  const std::string prompt_text = render_prompt(e).first;
  REQUIRE(enc.prompt_ids.size() == prompt_text.size() + 2);
  CHECK(enc.prompt_ids.front() == Tokenizer::kBos);
  CHECK(enc.prompt_ids.back() == Tokenizer::kSep);
  const std::vector<int> middle(enc.prompt_ids.begin() + 1, enc.prompt_ids.end() - 1);
  CHECK(tok.decode(middle) == prompt_text);
  CHECK(enc.target_ids == tok.encode("xyz"));

  const std::vector<int> full = enc.full_sequence();
  REQUIRE(full.size() == enc.prompt_ids.size() + 4);
  CHECK(full.back() == Tokenizer::kEos);
  CHECK(rendered_length(e, tok) == static_cast<int>(full.size()));
}

TEST_CASE("make_batches: sizes, permutation, determinism") {
  const Corpus corpus = synth_corpus(10, 5);
  const auto batches = make_batches(corpus, 4, 123);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].rows == 4);
  CHECK(batches[1].rows == 4);
  CHECK(batches[2].rows == 2);

  std::set<std::size_t> seen;
  for (const Batch& b : batches)
    for (std::size_t idx : b.example_index) seen.insert(idx);
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 9);

  const auto again = make_batches(corpus, 4, 123);
  REQUIRE(again.size() == batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    CHECK(again[i].ids == batches[i].ids);
    CHECK(again[i].mask == batches[i].mask);
    CHECK(again[i].lengths == batches[i].lengths);
    CHECK(again[i].example_index == batches[i].example_index);
  }

  const auto other = make_batches(corpus, 4, 124);
  bool any_diff = false;
  for (std::size_t i = 0; i < batches.size(); ++i)
    if (other[i].example_index != batches[i].example_index) any_diff = true;
  CHECK(any_diff);

  CHECK_THROWS_AS(make_batches(corpus, 0, 1), ConfigError);
  CHECK(make_batches(Corpus{}, 4, 1).empty());
}

TEST_CASE("make_batches: row payload, mask extent, pad fill") {
  Tokenizer tok;
  Corpus corpus;
  corpus.examples = {{"a", "", "one"}, {"bb", "", "response two"}, {"ccc", "zz", "thirdthird"}};
  const auto batches = make_batches(corpus, 2, 7);
  REQUIRE(batches.size() == 2);
  for (const Batch& b : batches) {
    REQUIRE(static_cast<int>(b.lengths.size()) == b.rows);
    REQUIRE(static_cast<int>(b.ids.size()) == b.rows * b.max_len);
    REQUIRE(static_cast<int>(b.mask.size()) == b.rows * b.max_len);
    for (int r = 0; r < b.rows; ++r) {
      const Example& e = corpus.examples[b.example_index[r]];
      const EncodedExample enc = encode_example(e, tok);
      const std::vector<int> full = enc.full_sequence();
      REQUIRE(b.lengths[r] == static_cast<int>(full.size()));
      int mask_sum = 0;
      for (int p = 0; p < b.max_len; ++p) {
        const std::size_t at = static_cast<std::size_t>(r) * b.max_len + p;
        if (p < b.lengths[r]) {
          CHECK(b.ids[at] == full[p]);
          const bool expect = p >= static_cast<int>(enc.prompt_ids.size());
          CHECK(b.mask[at] == (expect ? 1 : 0));
        } else {
          CHECK(b.ids[at] == Tokenizer::kPad);
          CHECK(b.mask[at] == 0);
        }
        mask_sum += b.mask[at];
      }
      CHECK(mask_sum == static_cast<int>(e.response.size()) + 1);
    }
  }
}

TEST_CASE("synth_corpus: deterministic, distinct, length-bounded") {
  const Corpus a = synth_corpus(60, 9);
  const Corpus b = synth_corpus(60, 9);
  REQUIRE(a.size() == 60);
  CHECK(a.examples == b.examples);

  const Corpus c = synth_corpus(60, 10);
  CHECK(a.examples != c.examples);

  Tokenizer tok;
  std::set<std::pair<std::string, std::string>> pairs;
  for (const Example& e : a.examples) {
    pairs.insert({e.instruction, e.context});
    CHECK(e.response.size() >= 8);
    CHECK(e.response.size() <= 64);
    CHECK(rendered_length(e, tok) <= 256);
  }
  CHECK(pairs.size() == a.size());
  CHECK_THROWS_AS(synth_corpus(0, 1), ContractError);
}

TEST_CASE("jsonl: save then load restores the corpus") {
  TempFile tmp("distaudit_data_roundtrip.jsonl");
  Corpus corpus = synth_corpus(20, 33);
  corpus.split_tag = SplitTag::test;
  save_jsonl(corpus, tmp.str());

  LoadReport report;
  const Corpus back = load_jsonl(tmp.str(), SplitTag::test, 256, &report);
  CHECK(back.examples == corpus.examples);
  CHECK(back.split_tag == SplitTag::test);
  CHECK(report.accepted == 20);
  CHECK(report.rejected == 0);
  CHECK(report.diagnostics.empty());
}

TEST_CASE("jsonl: malformed records are skipped with line diagnostics") {
  TempFile tmp("distaudit_data_reject.jsonl");
  {
    std::ofstream out(tmp.str(), std::ios::binary);
    out << R"({"instruction":"ok one","context":"","response":"fine response"})" << "\n";
    out << "\n";
    out << "{broken json\n";
    out << "[1,2,3]\n";
    out << R"({"instruction":"no response key","context":""})" << "\n";
    out << R"({"instruction":7,"context":"","response":"x"})" << "\n";
    out << R"({"instruction":"empty","context":"","response":""})" << "\n";
    out << R"({"instruction":"too long","context":"","response":"this response renders well past the configured window cap and gets rejected"})"
        << "\n";
    out << R"({"instruction":"ok two","context":"with ctx","response":"also fine"})" << "\n";
  }
  LoadReport report;
  const Corpus corpus = load_jsonl(tmp.str(), SplitTag::train, 96, &report);
  REQUIRE(corpus.size() == 2);
  CHECK(corpus.examples[0].instruction == "ok one");
  CHECK(corpus.examples[1].context == "with ctx");
  CHECK(report.accepted == 2);
  CHECK(report.rejected == 6);
  REQUIRE(report.diagnostics.size() == 6);
  CHECK(report.diagnostics[0].find("line 3") == 0);
  CHECK(report.diagnostics[1].find("line 4") == 0);
  CHECK(report.diagnostics[2].find("response") != std::string::npos);
  CHECK(report.diagnostics[3].find("instruction") != std::string::npos);
  CHECK(report.diagnostics[4].find("empty response") != std::string::npos);
  CHECK(report.diagnostics[5].find("max_seq_len") != std::string::npos);

  CHECK_THROWS_AS(load_jsonl("/nonexistent/nowhere.jsonl", SplitTag::train), IoError);
}

TEST_CASE("corpus_overlap counts shared triples") {
  const Corpus base = synth_corpus(20, 21);
  Corpus a, b;
  a.examples.assign(base.examples.begin(), base.examples.begin() + 10);
  b.examples.assign(base.examples.begin() + 10, base.examples.end());
  CHECK(corpus_overlap(a, b) == 0);
  CHECK(corpus_overlap(a, a) == 10);

  Corpus c;
  c.examples.assign(base.examples.begin() + 3, base.examples.begin() + 7);
  c.examples.push_back({"fresh", "", "unseen response"});
  CHECK(corpus_overlap(a, c) == 4);
  CHECK(corpus_overlap(c, a) == 4);

  Corpus dup;
  dup.examples = {base.examples[0], base.examples[0]};
  CHECK(corpus_overlap(a, dup) == 2);
}

TEST_CASE("sample_corpus: seeded subsequence of the original") {
  Corpus corpus = synth_corpus(50, 3);
  corpus.split_tag = SplitTag::pretrain;

  const Corpus all = sample_corpus(corpus, 50, 1);
  CHECK(all.examples == corpus.examples);
  const Corpus more = sample_corpus(corpus, 500, 1);
  CHECK(more.examples == corpus.examples);

  const Corpus s1 = sample_corpus(corpus, 10, 8);
  const Corpus s2 = sample_corpus(corpus, 10, 8);
  const Corpus s3 = sample_corpus(corpus, 10, 9);
  REQUIRE(s1.size() == 10);
  CHECK(s1.examples == s2.examples);
  CHECK(s1.examples != s3.examples);
  CHECK(s1.split_tag == SplitTag::pretrain);

  // Original relative order survives: the sample is a subsequence.
  std::size_t cursor = 0;
  for (const Example& e : s1.examples) {
    while (cursor < corpus.size() && !(corpus.examples[cursor] == e)) ++cursor;
    REQUIRE(cursor < corpus.size());
    ++cursor;
  }
}

TEST_CASE("split_tag_name") {
  CHECK(split_tag_name(SplitTag::train) == "train");
  CHECK(split_tag_name(SplitTag::test) == "test");
  CHECK(split_tag_name(SplitTag::pretrain) == "pretrain");
}
