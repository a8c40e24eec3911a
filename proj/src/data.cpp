#include "distaudit/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "distaudit/error.hpp"
#include "distaudit/rng.hpp"

namespace distaudit {

using json = nlohmann::json;

std::string split_tag_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::test: return "test";
    case SplitTag::pretrain: return "pretrain";
  }
  throw ContractError("split_tag_name: unknown tag");
}

std::pair<std::string, std::string> render_prompt(const Example& e) {
  std::string prompt = "### Instruction:\n" + e.instruction + "\n\n";
  if (!e.context.empty()) prompt += "### Context:\n" + e.context + "\n\n";
  prompt += "### Response:\n";
  return {prompt, e.response};
}

EncodedExample encode_example(const Example& e, const Tokenizer& tok) {
  const auto [prompt_text, target_text] = render_prompt(e);
  EncodedExample enc;
  enc.prompt_ids.push_back(Tokenizer::kBos);
  for (int id : tok.encode(prompt_text)) enc.prompt_ids.push_back(id);
  enc.prompt_ids.push_back(Tokenizer::kSep);
  enc.target_ids = tok.encode(target_text);
  return enc;
}

int rendered_length(const Example& e, const Tokenizer& tok) {
  const EncodedExample enc = encode_example(e, tok);
  return static_cast<int>(enc.prompt_ids.size() + enc.target_ids.size()) + 1;
}

Corpus load_jsonl(const std::string& path, SplitTag tag, int max_seq_len, LoadReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_jsonl: cannot open " + path);
  Tokenizer tok;
  Corpus corpus;
  corpus.split_tag = tag;
  LoadReport local;
  auto reject = [&](std::size_t line_no, const std::string& why) {
    local.rejected += 1;
    std::string msg = "line " + std::to_string(line_no) + ": " + why;
    std::cerr << "load_jsonl: " << path << ": " << msg << "\n";
    local.diagnostics.push_back(std::move(msg));
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    if (line.empty()) continue;
    json obj = json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      reject(line_no, "not a JSON object");
      continue;
    }
    Example e;
    bool ok = true;
    for (const char* key : {"instruction", "context", "response"}) {
      if (!obj.contains(key) || !obj[key].is_string()) {
        reject(line_no, std::string("missing or non-string key \"") + key + "\"");
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    e.instruction = obj["instruction"].get<std::string>();
    e.context = obj["context"].get<std::string>();
    e.response = obj["response"].get<std::string>();
    if (e.response.empty()) {
      reject(line_no, "empty response");
      continue;
    }
    if (rendered_length(e, tok) > max_seq_len) {
      reject(line_no, "rendered length " + std::to_string(rendered_length(e, tok)) +
                          " exceeds max_seq_len " + std::to_string(max_seq_len));
      continue;
    }
    corpus.examples.push_back(std::move(e));
    local.accepted += 1;
  }
  if (report) *report = local;
  return corpus;
}

void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_jsonl: cannot open " + path + " for writing");
  for (const Example& e : corpus.examples) {
    json obj;
    obj["instruction"] = e.instruction;
    obj["context"] = e.context;
    obj["response"] = e.response;
    out << obj.dump() << "\n";
  }
  if (!out) throw IoError("save_jsonl: write failed for " + path);
}

std::vector<Batch> make_batches(const Corpus& corpus, int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  Tokenizer tok;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.rows = static_cast<int>(end - start);
    std::vector<std::vector<int>> seqs;
    std::vector<std::vector<std::uint8_t>> masks;
    for (std::size_t i = start; i < end; ++i) {
      const EncodedExample enc = encode_example(corpus.examples[order[i]], tok);
      std::vector<int> ids = enc.full_sequence();
      std::vector<std::uint8_t> mask(ids.size(), 0);
      // Targets start right after BOS + prompt + SEP; EOS is masked in too.
      for (std::size_t p = enc.prompt_ids.size(); p < ids.size(); ++p) mask[p] = 1;
      b.lengths.push_back(static_cast<int>(ids.size()));
      b.example_index.push_back(order[i]);
      b.max_len = std::max(b.max_len, static_cast<int>(ids.size()));
      seqs.push_back(std::move(ids));
      masks.push_back(std::move(mask));
    }
    b.ids.assign(static_cast<std::size_t>(b.rows) * b.max_len, Tokenizer::kPad);
    b.mask.assign(static_cast<std::size_t>(b.rows) * b.max_len, 0);
    for (int r = 0; r < b.rows; ++r) {
      std::copy(seqs[r].begin(), seqs[r].end(),
                b.ids.begin() + static_cast<std::size_t>(r) * b.max_len);
      std::copy(masks[r].begin(), masks[r].end(),
                b.mask.begin() + static_cast<std::size_t>(r) * b.max_len);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

namespace {

const std::vector<std::string> kNouns = {
    "relay",  "beacon",   "ledger",  "turbine", "archive",  "sensor",
    "valve",  "compiler", "antenna", "reactor", "lattice",  "conduit",
    "gasket", "rotor",    "prism",   "socket",  "filament", "manifold",
    "drone",  "capacitor"};
const std::vector<std::string> kAdjectives = {
    "amber", "crimson", "hollow", "silent", "rapid", "frozen", "gilded",
    "rusty", "polar",   "lunar",  "violet", "ashen", "briny",  "mossy",
    "stark", "vivid",   "pale",   "dense",  "slate", "ionic"};
const std::vector<std::string> kPlaces = {
    "harbor", "vault",   "annex",    "depot",   "mesa",    "quarry", "atrium",
    "bastion", "garrison", "orchard", "terrace", "foundry", "grove",  "citadel",
    "pier"};
const std::vector<std::string> kVerbs = {
    "calibrates", "filters", "routes", "stores", "guards", "signals", "tracks",
    "cools",      "heats",   "aligns", "splits", "merges", "scans",   "locks",
    "vents"};
const std::vector<std::string> kOwners = {
    "The night crew", "The dock warden", "Unit seven",     "The registry",
    "The field team", "The curator",     "Mirror control", "The harbor guild"};

std::string pick(const std::vector<std::string>& xs, Rng& rng) {
  return xs[rng.below(xs.size())];
}

std::string make_code(Rng& rng) {
  std::string code;
  code.push_back(static_cast<char>('A' + rng.below(26)));
  code.push_back(static_cast<char>('A' + rng.below(26)));
  code.push_back('-');
  code.push_back(static_cast<char>('0' + rng.below(10)));
  code.push_back(static_cast<char>('0' + rng.below(10)));
  return code;
}

Example synth_example(Rng& rng) {
  Example e;
  switch (rng.below(6)) {
    case 0: {
      const std::string adj = pick(kAdjectives, rng), noun = pick(kNouns, rng);
      e.instruction = "What does the " + adj + " " + noun + " do?";
      e.response = "It " + pick(kVerbs, rng) + " the " + pick(kNouns, rng) + " at the " +
                   pick(kPlaces, rng) + ".";
      break;
    }
    case 1: {
      const std::string code = make_code(rng);
      e.instruction = "Describe unit " + code + ".";
      e.response = "Unit " + code + " " + pick(kVerbs, rng) + " the " + pick(kAdjectives, rng) +
                   " " + pick(kNouns, rng) + ".";
      break;
    }
    case 2: {
      e.instruction =
          "Who maintains the " + pick(kNouns, rng) + " in the " + pick(kPlaces, rng) + "?";
      e.response = pick(kOwners, rng) + " maintains it.";
      break;
    }
    case 3: {
      e.instruction = "Where is the " + pick(kAdjectives, rng) + " " + pick(kNouns, rng) +
                      " stored?";
      e.response = "It is stored in the " + pick(kPlaces, rng) + ".";
      break;
    }
    case 4: {
      const std::string noun = pick(kNouns, rng), noun2 = pick(kNouns, rng);
      const std::string verb = pick(kVerbs, rng);
      e.instruction = "Summarize the log entry.";
      e.context = "Entry " + make_code(rng) + ": the " + noun + " " + verb + " the " +
                  pick(kAdjectives, rng) + " " + noun2 + ".";
      e.response = "The " + noun + " " + verb + " the " + noun2 + ".";
      break;
    }
    default: {
      e.instruction = "State the passcode for the " + pick(kPlaces, rng) + ".";
      e.response = "The passcode is " + make_code(rng) + "-" +
                   std::to_string(rng.below(90) + 10) + ".";
      break;
    }
  }
  return e;
}

}  // namespace

Corpus synth_corpus(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ContractError("synth_corpus: n must be >= 1");
  Rng rng(seed);
  Corpus corpus;
  std::set<std::pair<std::string, std::string>> seen;  // (instruction, context)
  std::size_t attempts = 0;
  const std::size_t max_attempts = 200 * n + 1000;
  while (corpus.examples.size() < n) {
    if (++attempts > max_attempts)
      throw ContractError("synth_corpus: could not generate enough distinct examples");
    Example e = synth_example(rng);
    const std::size_t len = e.response.size();
    if (len < 8 || len > 64) continue;
    if (!seen.insert({e.instruction, e.context}).second) continue;
    corpus.examples.push_back(std::move(e));
  }
  return corpus;
}

std::size_t corpus_overlap(const Corpus& a, const Corpus& b) {
  std::set<std::tuple<std::string, std::string, std::string>> triples;
  for (const Example& e : a.examples) triples.insert({e.instruction, e.context, e.response});
  std::size_t shared = 0;
  for (const Example& e : b.examples)
    if (triples.count({e.instruction, e.context, e.response})) shared += 1;
  return shared;
}

Corpus sample_corpus(const Corpus& corpus, std::size_t n, std::uint64_t seed) {
  if (n >= corpus.size()) return corpus;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(n);
  std::sort(order.begin(), order.end());
  Corpus out;
  out.split_tag = corpus.split_tag;
  out.examples.reserve(n);
  for (std::size_t i : order) out.examples.push_back(corpus.examples[i]);
  return out;
}

}  // namespace distaudit
