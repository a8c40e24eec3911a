#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "distaudit/tokenizer.hpp"

namespace distaudit {

// One instruction/context/response record. context may be empty; response
// must not be.
struct Example {
  std::string instruction;
  std::string context;
  std::string response;

  bool operator==(const Example&) const = default;
};

enum class SplitTag { train, test, pretrain };

std::string split_tag_name(SplitTag tag);

struct Corpus {
  std::vector<Example> examples;
  SplitTag split_tag = SplitTag::train;

  std::size_t size() const { return examples.size(); }
};

struct LoadReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::string> diagnostics;  // "line N: reason"
};

// Reads a JSONL corpus, one object per line with keys instruction, context,
// response. Malformed or overlong records are skipped; each rejection is
// reported to stderr with its line number and collected in the report.
Corpus load_jsonl(const std::string& path, SplitTag tag, int max_seq_len = 256,
                  LoadReport* report = nullptr);

void save_jsonl(const Corpus& corpus, const std::string& path);

// Canonical prompt rendering. The context block is omitted entirely when
// the context is empty; rendering is injective on (instruction, context).
std::pair<std::string, std::string> render_prompt(const Example& e);

// Token-level view of one example: prompt_ids = BOS + encode(prompt) + SEP,
// target_ids = encode(response). The full training sequence appends EOS.
struct EncodedExample {
  std::vector<int> prompt_ids;
  std::vector<int> target_ids;

  std::vector<int> full_sequence() const {
    std::vector<int> ids = prompt_ids;
    ids.insert(ids.end(), target_ids.begin(), target_ids.end());
    ids.push_back(Tokenizer::kEos);
    return ids;
  }
};

EncodedExample encode_example(const Example& e, const Tokenizer& tok);

// Length of the full training sequence (BOS + prompt + SEP + target + EOS).
int rendered_length(const Example& e, const Tokenizer& tok);

// Padded id block with per-position loss masks. mask is 1 exactly on
// target and EOS positions. lengths give the unpadded extents.
struct Batch {
  int rows = 0;
  int max_len = 0;
  std::vector<int> ids;             // rows x max_len
  std::vector<std::uint8_t> mask;   // rows x max_len
  std::vector<int> lengths;
  std::vector<std::size_t> example_index;
};

// Shuffles the corpus deterministically in seed and packs padded batches.
std::vector<Batch> make_batches(const Corpus& corpus, int batch_size, std::uint64_t seed);

// Deterministic synthetic corpus: templated instruction/response pairs with
// seeded lexical variation. All (instruction, context) pairs are distinct.
Corpus synth_corpus(std::size_t n, std::uint64_t seed);

// Number of (p, c, s) triples appearing in both corpora.
std::size_t corpus_overlap(const Corpus& a, const Corpus& b);

// Seeded subsample of n examples in original corpus order. Returns the
// corpus unchanged when n covers it.
Corpus sample_corpus(const Corpus& corpus, std::size_t n, std::uint64_t seed);

}  // namespace distaudit
