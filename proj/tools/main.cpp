#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "distaudit/harness.hpp"

namespace {

using namespace distaudit;

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("short write to '" + path + "'");
}

SplitTag tag_from_name(const std::string& name) {
  if (name == "train") return SplitTag::train;
  if (name == "test") return SplitTag::test;
  if (name == "pretrain") return SplitTag::pretrain;
  throw ConfigError("unknown split tag '" + name + "'");
}

int run_synth(std::size_t count, std::uint64_t seed, const std::string& tag,
              const std::string& out) {
  const Corpus corpus = synth_corpus(count, seed);
  Corpus tagged = corpus;
  tagged.split_tag = tag_from_name(tag);
  save_jsonl(tagged, out);
  std::printf("wrote %zu examples to %s\n", tagged.size(), out.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& out, const std::string& teacher_path,
              const std::string& pretrain_path, std::optional<std::uint64_t> seed) {
  const nlohmann::json j = load_json(config_path);
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  ModelConfig mc;
  if (j.contains("arch"))
    mc = arch_config(j.at("arch").get<std::string>());
  else if (j.contains("config"))
    mc = config_from_json(j.at("config"));
  else
    throw ConfigError("train config needs an 'arch' name or a 'config' object");
  if (!j.contains("regime")) throw ConfigError("train config needs a 'regime' object");
  TrainingRegime regime = regime_from_json(j.at("regime"));
  if (seed) regime.seed = *seed;

  const Corpus corpus = load_jsonl(corpus_path, SplitTag::train);
  if (corpus.examples.empty()) throw ConfigError("corpus '" + corpus_path + "' is empty");

  TrainedModel teacher;
  const TrainedModel* teacher_ptr = nullptr;
  if (!teacher_path.empty()) {
    teacher = load_checkpoint(teacher_path);
    teacher_ptr = &teacher;
  }
  Corpus pretrain;
  const Corpus* pretrain_ptr = nullptr;
  if (!pretrain_path.empty()) {
    pretrain = load_jsonl(pretrain_path, SplitTag::pretrain);
    pretrain_ptr = &pretrain;
  }

  const TrainedModel model = train(mc, teacher_ptr, corpus, regime, pretrain_ptr);
  save_checkpoint(out, model);
  std::printf("trained %s (%ld parameters, %s) -> %s\n",
              j.contains("arch") ? j.at("arch").get<std::string>().c_str() : "custom",
              param_count(mc), regime_kind_name(regime.kind).c_str(), out.c_str());
  return 0;
}

int run_audit(const std::string& ckpt_path, const std::string& corpus_path, int k,
              std::optional<std::size_t> sample, std::uint64_t seed, const std::string& out) {
  const TrainedModel model = load_checkpoint(ckpt_path);
  const Corpus corpus = load_jsonl(corpus_path, SplitTag::train);
  AuditConfig cfg;
  cfg.k = k;
  cfg.sample_size = sample;
  cfg.seed = seed;
  const StepModel sm = make_step_model(model.params);
  const AuditReport rep = memorization_fraction(sm, corpus, cfg);
  std::printf("mem_fraction %.3f (memorized %zu of %zu, skipped %zu, k=%d)\n", rep.fraction,
              rep.n_memorized, rep.n_evaluated, rep.n_skipped, k);
  if (!out.empty()) {
    std::string csv = "example_index,matched,matched_prefix_len\n";
    for (const MatchRecord& r : rep.records)
      csv += std::to_string(r.example_index) + "," + (r.matched ? "1" : "0") + "," +
             std::to_string(r.matched_prefix_len) + "\n";
    write_text(out, csv);
  }
  return 0;
}

int run_rouge(const std::string& ckpt_path, const std::string& train_path,
              const std::string& test_path, std::size_t train_sample, std::size_t test_sample,
              std::uint64_t seed, const std::string& out) {
  const TrainedModel model = load_checkpoint(ckpt_path);
  const Corpus train = load_jsonl(train_path, SplitTag::train);
  const Corpus test = load_jsonl(test_path, SplitTag::test);
  const Corpus ts = train_sample ? sample_corpus(train, train_sample, derive_seed(seed, 0)) : train;
  const Corpus vs = test_sample ? sample_corpus(test, test_sample, derive_seed(seed, 1)) : test;
  const StepModel sm = make_step_model(model.params);
  const RougeReport r = rouge_report(sm, ts, vs);
  std::printf("rouge1 train %.2f test %.2f\n", r.rouge1_train, r.rouge1_test);
  std::printf("rouge2 train %.2f test %.2f\n", r.rouge2_train, r.rouge2_test);
  std::printf("rougeL train %.2f test %.2f\n", r.rougeL_train, r.rougeL_test);
  if (!out.empty()) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "r1_train,r1_test,r2_train,r2_test,rl_train,rl_test\n"
                  "%.2f,%.2f,%.2f,%.2f,%.2f,%.2f\n",
                  r.rouge1_train, r.rouge1_test, r.rouge2_train, r.rouge2_test, r.rougeL_train,
                  r.rougeL_test);
    write_text(out, buf);
  }
  return 0;
}

int run_experiment_verb(const std::string& config_path, const std::string& out_dir,
                        std::optional<std::uint64_t> seed, bool resume) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (seed) cfg.seed = *seed;
  const ExperimentResult res = run_experiment(cfg, out_dir, resume);
  std::printf("experiment complete: %zu result rows, %zu failures -> %s\n", res.rows.size(),
              res.failures.size(), out_dir.c_str());
  return res.failures.empty() ? 0 : 2;
}

int run_report(const std::vector<std::string>& csv_paths, const std::string& out) {
  std::vector<ResultRow> rows;
  for (const std::string& path : csv_paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<ResultRow> r = parse_csv(text);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const std::string md = format_markdown_report(rows);
  if (out.empty())
    std::fputs(md.c_str(), stdout);
  else
    write_text(out, md);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distaudit: train small decoders under several distillation regimes and "
               "audit how much of the training corpus they reproduce verbatim"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path, corpus_path, out_path, teacher_path, pretrain_path;
  std::string ckpt_path, train_path, test_path, tag = "train";
  std::size_t count = 0, train_sample = 0, test_sample = 0;
  std::optional<std::uint64_t> seed_opt;
  std::optional<std::size_t> sample_opt;
  int k = 50;
  bool resume = false;
  std::vector<std::string> csv_paths;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic JSONL corpus");
  synth->add_option("--count", count, "number of examples")->required();
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--tag", tag, "split tag (train|test|pretrain)");
  synth->add_option("--out", out_path, "output JSONL path")->required();

  CLI::App* tr = app.add_subcommand("train", "train one model and write a checkpoint");
  tr->add_option("--config", config_path, "JSON with arch/config and regime")->required();
  tr->add_option("--corpus", corpus_path, "training corpus (JSONL)")->required();
  tr->add_option("--teacher", teacher_path, "teacher checkpoint (required for distillation)");
  tr->add_option("--pretrain", pretrain_path, "pretraining corpus for rkld");
  tr->add_option("--seed", seed_opt, "override the regime seed");
  tr->add_option("--out", out_path, "checkpoint path")->required();

  CLI::App* audit = app.add_subcommand("audit", "measure the memorization fraction");
  audit->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  audit->add_option("--corpus", corpus_path, "corpus to audit (JSONL)")->required();
  audit->add_option("--k", k, "verbatim prefix length");
  audit->add_option("--sample", sample_opt, "audit a seeded subsample");
  audit->add_option("--seed", seed, "sampling seed");
  audit->add_option("--out", out_path, "optional per-example CSV");

  CLI::App* rouge = app.add_subcommand("rouge", "score generations with ROUGE-1/2/L");
  rouge->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  rouge->add_option("--train", train_path, "training split (JSONL)")->required();
  rouge->add_option("--test", test_path, "held-out split (JSONL)")->required();
  rouge->add_option("--train-sample", train_sample, "subsample size for the training split");
  rouge->add_option("--test-sample", test_sample, "subsample size for the held-out split");
  rouge->add_option("--seed", seed, "sampling seed");
  rouge->add_option("--out", out_path, "optional CSV output");

  CLI::App* exp = app.add_subcommand("experiment", "run a full training + audit protocol");
  exp->add_option("--config", config_path, "experiment JSON")->required();
  exp->add_option("--seed", seed_opt, "override the experiment seed");
  exp->add_flag("--resume", resume, "reuse checkpoints already present in the output dir");
  exp->add_option("--out", out_path, "output directory")->required();

  CLI::App* rep = app.add_subcommand("report", "merge result CSVs into a markdown report");
  rep->add_option("csv", csv_paths, "results.csv files")->required();
  rep->add_option("--out", out_path, "markdown path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Command-line misuse is a configuration error; help/version exit clean.
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return run_synth(count, seed, tag, out_path);
    if (tr->parsed())
      return run_train(config_path, corpus_path, out_path, teacher_path, pretrain_path, seed_opt);
    if (audit->parsed())
      return run_audit(ckpt_path, corpus_path, k, sample_opt, seed, out_path);
    if (rouge->parsed())
      return run_rouge(ckpt_path, train_path, test_path, train_sample, test_sample, seed,
                       out_path);
    if (exp->parsed()) return run_experiment_verb(config_path, out_path, seed_opt, resume);
    if (rep->parsed()) return run_report(csv_paths, out_path);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
