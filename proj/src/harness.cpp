#include "distaudit/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace distaudit {

namespace {

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

RunSpec run_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  RunSpec spec;
  try {
    spec.id = j.at("id").get<std::string>();
    if (j.contains("arch")) {
      const std::string arch = j.at("arch").get<std::string>();
      spec.config = arch_config(arch);
      spec.label = j.value("label", arch);
    } else {
      spec.config = config_from_json(j.at("config"));
      spec.label = j.value("label", std::string());
    }
    spec.regime = regime_from_json(j.at("regime"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
  if (spec.id.empty()) throw ConfigError(std::string(what) + ": id must not be empty");
  if (spec.label.empty())
    throw ConfigError(std::string(what) + " '" + spec.id + "': label must not be empty");
  return spec;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (version != 1)
    throw ConfigError("experiment config: unsupported version " + std::to_string(version));
  if (audit_k < 1) throw ConfigError("experiment config: audit k must be positive");
  if (audit_sample && *audit_sample == 0)
    throw ConfigError("experiment config: audit sample must be positive when given");
  if (data.synthetic) {
    if (data.n_train == 0 || data.n_test == 0)
      throw ConfigError("experiment config: synthetic train/test sizes must be positive");
  } else {
    if (data.train_path.empty() || data.test_path.empty())
      throw ConfigError("experiment config: train/test corpus paths are required");
  }
  std::set<std::string> ids{teacher.id};
  for (const RunSpec& s : students)
    if (!ids.insert(s.id).second)
      throw ConfigError("experiment config: duplicate run id '" + s.id + "'");
  teacher.config.validate();
  teacher.regime.validate();
  if (teacher.regime.kind != RegimeKind::SFT)
    throw ConfigError("experiment config: the teacher must train with the sft regime");
  for (const RunSpec& s : students) {
    s.config.validate();
    s.regime.validate();
    if (s.config.vocab_size != teacher.config.vocab_size)
      throw ConfigError("experiment config: run '" + s.id + "' changes the vocabulary size");
  }
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig cfg;
  try {
    cfg.version = j.at("version").get<int>();
    cfg.name = j.value("name", std::string());
    cfg.seed = j.value("seed", std::uint64_t{0});
    const nlohmann::json& d = j.at("data");
    if (d.contains("synthetic") == d.contains("paths"))
      throw ConfigError("experiment config: data must hold exactly one of synthetic/paths");
    if (d.contains("synthetic")) {
      const nlohmann::json& s = d.at("synthetic");
      cfg.data.synthetic = true;
      cfg.data.n_train = s.at("train").get<std::size_t>();
      cfg.data.n_test = s.at("test").get<std::size_t>();
      cfg.data.n_pretrain = s.value("pretrain", std::size_t{0});
    } else {
      const nlohmann::json& p = d.at("paths");
      cfg.data.synthetic = false;
      cfg.data.train_path = p.at("train").get<std::string>();
      cfg.data.test_path = p.at("test").get<std::string>();
      cfg.data.pretrain_path = p.value("pretrain", std::string());
    }
    if (j.contains("audit")) {
      const nlohmann::json& a = j.at("audit");
      cfg.audit_k = a.value("k", 50);
      if (a.contains("sample") && !a.at("sample").is_null())
        cfg.audit_sample = a.at("sample").get<std::size_t>();
    }
    if (j.contains("rouge")) {
      const nlohmann::json& r = j.at("rouge");
      cfg.rouge_train_sample = r.value("train_sample", std::size_t{128});
      cfg.rouge_test_sample = r.value("test_sample", std::size_t{128});
    }
    cfg.teacher = run_from_json(j.at("teacher"), "teacher");
    if (j.contains("runs"))
      for (const nlohmann::json& r : j.at("runs")) cfg.students.push_back(run_from_json(r, "run"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
  return experiment_config_from_json(j);
}

ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                                bool resume) {
  config.validate();
  fs::create_directories(fs::path(out_dir) / "checkpoints");

  Corpus train_set, test_set, pretrain_set;
  pretrain_set.split_tag = SplitTag::pretrain;
  if (config.data.synthetic) {
    const std::size_t total = config.data.n_train + config.data.n_test + config.data.n_pretrain;
    const Corpus all = synth_corpus(total, derive_seed(config.seed, fnv1a64("data")));
    auto slice = [&all](std::size_t from, std::size_t count, SplitTag tag) {
      Corpus c;
      c.split_tag = tag;
      c.examples.assign(all.examples.begin() + from, all.examples.begin() + from + count);
      return c;
    };
    train_set = slice(0, config.data.n_train, SplitTag::train);
    test_set = slice(config.data.n_train, config.data.n_test, SplitTag::test);
    pretrain_set = slice(config.data.n_train + config.data.n_test, config.data.n_pretrain,
                     SplitTag::pretrain);
  } else {
    train_set = load_jsonl(config.data.train_path, SplitTag::train);
    test_set = load_jsonl(config.data.test_path, SplitTag::test);
    if (!config.data.pretrain_path.empty())
      pretrain_set = load_jsonl(config.data.pretrain_path, SplitTag::pretrain);
    if (train_set.examples.empty() || test_set.examples.empty())
      throw ConfigError("experiment: train and test corpora must not be empty");
    if (corpus_overlap(train_set, test_set) > 0)
      throw ConfigError("experiment: train and test corpora overlap");
  }

  const std::uint64_t audit_seed = derive_seed(config.seed, fnv1a64("audit"));
  const Corpus rouge_train =
      sample_corpus(train_set, config.rouge_train_sample, derive_seed(config.seed, fnv1a64("rouge")));
  const Corpus rouge_test =
      sample_corpus(test_set, config.rouge_test_sample, derive_seed(config.seed, fnv1a64("rouge"), 1));

  ExperimentResult result;
  TrainedModel teacher_model;
  bool teacher_ok = false;
  std::map<int, Corpus> seqkd_by_width;

  auto run_one = [&](const RunSpec& spec, const TrainedModel* teacher_ptr) -> TrainedModel {
    const std::string ckpt = (fs::path(out_dir) / "checkpoints" / (spec.id + ".daud")).string();
    TrainingRegime regime = spec.regime;
    regime.seed = derive_seed(config.seed, fnv1a64(spec.id));
    if (resume && fs::exists(ckpt)) {
      std::fprintf(stderr, "[distaudit] run %s: resuming from %s\n", spec.id.c_str(),
                   ckpt.c_str());
      TrainedModel m = load_checkpoint(ckpt);
      if (!(m.config == spec.config))
        throw IntegrityError("checkpoint '" + ckpt + "' does not match the configured model");
      if (m.regime.kind != regime.kind)
        throw IntegrityError("checkpoint '" + ckpt + "' was trained under a different regime");
      return m;
    }
    const Corpus* prebuilt = nullptr;
    if (regime.kind == RegimeKind::SEQ_KD) {
      auto it = seqkd_by_width.find(regime.seqkd_beam_width);
      if (it == seqkd_by_width.end()) {
        std::fprintf(stderr, "[distaudit] decoding seq_kd corpus (beam %d)\n",
                     regime.seqkd_beam_width);
        std::vector<std::string> notes;
        Corpus decoded =
            build_seqkd_corpus(*teacher_ptr, train_set, regime.seqkd_beam_width,
                               GenerationBudget{kSeqKdMaxNewTokens, Tokenizer::kEos}, &notes);
        for (const std::string& n : notes)
          std::fprintf(stderr, "[distaudit] seq_kd corpus: %s\n", n.c_str());
        it = seqkd_by_width.emplace(regime.seqkd_beam_width, std::move(decoded)).first;
      }
      prebuilt = &it->second;
    }
    std::fprintf(stderr, "[distaudit] run %s: training (%s, %s)\n", spec.id.c_str(),
                 spec.label.c_str(), regime_kind_name(regime.kind).c_str());
    TrainedModel m = train(spec.config, teacher_ptr, train_set, regime,
                           pretrain_set.examples.empty() ? nullptr : &pretrain_set, prebuilt);
    save_checkpoint(ckpt, m);
    return m;
  };

  auto audit_one = [&](const RunSpec& spec, const TrainedModel& model) {
    const StepModel sm = make_step_model(model.params);
    AuditConfig ac;
    ac.k = config.audit_k;
    ac.sample_size = config.audit_sample;
    ac.seed = audit_seed;
    const AuditReport audit = memorization_fraction(sm, train_set, ac);
    const RougeReport rouge = rouge_report(sm, rouge_train, rouge_test);
    ResultRow row;
    row.model = spec.label;
    row.params = param_count(spec.config);
    row.technique = technique_label(spec.regime.kind);
    row.mem_fraction = audit.fraction;
    row.rouge = rouge;
    row.seed = config.seed;
    result.rows.push_back(row);
    std::fprintf(stderr, "[distaudit] run %s: mem %.3f r1 %.2f/%.2f\n", spec.id.c_str(),
                 audit.fraction, rouge.rouge1_train, rouge.rouge1_test);
  };

  try {
    teacher_model = run_one(config.teacher, nullptr);
    teacher_ok = true;
    audit_one(config.teacher, teacher_model);
  } catch (const std::exception& e) {
    result.failures.push_back(config.teacher.id + ": " + e.what());
    std::fprintf(stderr, "[distaudit] run %s FAILED: %s\n", config.teacher.id.c_str(), e.what());
  }

  for (const RunSpec& spec : config.students) {
    try {
      if (!teacher_ok && spec.regime.kind != RegimeKind::SFT)
        throw ContractError("teacher run failed; cannot distill");
      TrainedModel m = run_one(spec, teacher_ok ? &teacher_model : nullptr);
      audit_one(spec, m);
    } catch (const std::exception& e) {
      result.failures.push_back(spec.id + ": " + e.what());
      std::fprintf(stderr, "[distaudit] run %s FAILED: %s\n", spec.id.c_str(), e.what());
    }
  }

  write_text((fs::path(out_dir) / "results.csv").string(), format_csv(result.rows));
  write_text((fs::path(out_dir) / "report.md").string(),
             format_markdown_report(result.rows));
  std::string fail_text;
  for (const std::string& f : result.failures) fail_text += f + "\n";
  write_text((fs::path(out_dir) / "failures.txt").string(), fail_text);
  return result;
}

std::string format_csv(const std::vector<ResultRow>& rows) {
  std::string out = kCsvHeader;
  out += "\n";
  for (const ResultRow& r : rows) {
    out += r.model + "," + std::to_string(r.params) + "," + r.technique + "," +
           fmt(r.mem_fraction, 3) + "," + fmt(r.rouge.rouge1_train, 2) + "," +
           fmt(r.rouge.rouge1_test, 2) + "," + fmt(r.rouge.rouge2_train, 2) + "," +
           fmt(r.rouge.rouge2_test, 2) + "," + fmt(r.rouge.rougeL_train, 2) + "," +
           fmt(r.rouge.rougeL_test, 2) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw ConfigError("not a results CSV (unexpected header)");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 11)
      throw ConfigError("results CSV line " + std::to_string(lineno) + ": expected 11 fields");
    try {
      ResultRow r;
      r.model = fields[0];
      r.params = std::stol(fields[1]);
      r.technique = fields[2];
      r.mem_fraction = std::stod(fields[3]);
      r.rouge.rouge1_train = std::stod(fields[4]);
      r.rouge.rouge1_test = std::stod(fields[5]);
      r.rouge.rouge2_train = std::stod(fields[6]);
      r.rouge.rouge2_test = std::stod(fields[7]);
      r.rouge.rougeL_train = std::stod(fields[8]);
      r.rouge.rougeL_test = std::stod(fields[9]);
      r.seed = std::stoull(fields[10]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw ConfigError("results CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string format_markdown_report(const std::vector<ResultRow>& rows) {
  std::vector<std::string> models, techniques;
  for (const ResultRow& r : rows) {
    if (std::find(models.begin(), models.end(), r.model) == models.end())
      models.push_back(r.model);
    if (std::find(techniques.begin(), techniques.end(), r.technique) == techniques.end())
      techniques.push_back(r.technique);
  }
  std::set<std::uint64_t> seeds;
  for (const ResultRow& r : rows) seeds.insert(r.seed);

  struct Metric {
    const char* title;
    int decimals;
    double (*get)(const ResultRow&);
  };
  const Metric metrics[] = {
      {"Memorization fraction", 3, [](const ResultRow& r) { return r.mem_fraction; }},
      {"ROUGE-1 (train)", 2, [](const ResultRow& r) { return r.rouge.rouge1_train; }},
      {"ROUGE-1 (test)", 2, [](const ResultRow& r) { return r.rouge.rouge1_test; }},
      {"ROUGE-2 (train)", 2, [](const ResultRow& r) { return r.rouge.rouge2_train; }},
      {"ROUGE-2 (test)", 2, [](const ResultRow& r) { return r.rouge.rouge2_test; }},
      {"ROUGE-L (train)", 2, [](const ResultRow& r) { return r.rouge.rougeL_train; }},
      {"ROUGE-L (test)", 2, [](const ResultRow& r) { return r.rouge.rougeL_test; }},
  };

  std::string out = "# distaudit results\n\n";
  out += std::to_string(rows.size()) + " rows over " + std::to_string(seeds.size()) +
         " seed(s); cells average across seeds.\n";
  for (const Metric& m : metrics) {
    out += "\n## " + std::string(m.title) + "\n\n| model |";
    for (const std::string& t : techniques) out += " " + t + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < techniques.size(); ++i) out += "---|";
    out += "\n";
    for (const std::string& model : models) {
      out += "| " + model + " |";
      for (const std::string& t : techniques) {
        double total = 0.0;
        int n = 0;
        for (const ResultRow& r : rows)
          if (r.model == model && r.technique == t) {
            total += m.get(r);
            ++n;
          }
        out += n == 0 ? " - |" : " " + fmt(total / n, m.decimals) + " |";
      }
      out += "\n";
    }
  }
  return out;
}

}  // namespace distaudit
