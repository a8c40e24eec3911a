#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "distaudit/checkpoint.hpp"
#include "distaudit/metrics.hpp"

namespace distaudit {

// One model to train and audit. label is the architecture name shown in the
// model column; the regime seed is derived from the experiment seed and the
// run id, never taken from the config.
struct RunSpec {
  std::string id;
  std::string label;
  ModelConfig config;
  TrainingRegime regime;
};

// Either sizes for a synthetic protocol or paths to JSONL files. Exactly
// one of the two forms must be present.
struct DataSpec {
  bool synthetic = true;
  std::size_t n_train = 512, n_test = 128, n_pretrain = 256;
  std::string train_path, test_path, pretrain_path;  // pretrain_path may be empty
};

struct ExperimentConfig {
  int version = 1;
  std::string name;
  std::uint64_t seed = 0;
  DataSpec data;
  int audit_k = 50;
  std::optional<std::size_t> audit_sample;
  std::size_t rouge_train_sample = 128;
  std::size_t rouge_test_sample = 128;
  RunSpec teacher;
  std::vector<RunSpec> students;

  void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// One result line. Numbers are kept as formatted strings so that emit and
// re-parse round-trip byte-identically.
struct ResultRow {
  std::string model;
  long params = 0;
  std::string technique;
  double mem_fraction = 0.0;
  RougeReport rouge;
  std::uint64_t seed = 0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<std::string> failures;  // "run_id: reason"
};

// Trains (or resumes from checkpoints under out_dir/checkpoints) the
// teacher and every student, audits each, and writes results.csv,
// report.md, and failures.txt under out_dir. A failing run is recorded and
// skipped; the experiment continues.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                                bool resume);

std::string format_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_csv(const std::string& text);

// Markdown tables, one per metric, model sizes down and techniques across,
// averaging over seeds when rows repeat a (model, technique) cell.
std::string format_markdown_report(const std::vector<ResultRow>& rows);

inline constexpr const char* kCsvHeader =
    "model,params,technique,mem_fraction,r1_train,r1_test,r2_train,r2_test,rl_train,rl_test,"
    "seed";

}  // namespace distaudit
