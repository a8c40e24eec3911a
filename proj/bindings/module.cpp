// Python surface for the distaudit core. Configuration-shaped arguments are
// plain dicts converted to the same JSON the C++ loaders consume, so the two
// entry points accept identical schemas.

#include <optional>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "distaudit/data.hpp"
#include "distaudit/decode.hpp"
#include "distaudit/distill.hpp"
#include "distaudit/harness.hpp"
#include "distaudit/metrics.hpp"
#include "distaudit/model.hpp"
#include "distaudit/tokenizer.hpp"

namespace py = pybind11;
using namespace distaudit;

namespace {

nlohmann::json py_to_json(py::handle obj) {
  if (obj.is_none()) return nullptr;
  if (py::isinstance<py::bool_>(obj)) return obj.cast<bool>();
  if (py::isinstance<py::int_>(obj)) return obj.cast<std::int64_t>();
  if (py::isinstance<py::float_>(obj)) return obj.cast<double>();
  if (py::isinstance<py::str>(obj)) return obj.cast<std::string>();
  if (py::isinstance<py::dict>(obj)) {
    nlohmann::json j = nlohmann::json::object();
    for (auto item : obj.cast<py::dict>())
      j[item.first.cast<std::string>()] = py_to_json(item.second);
    return j;
  }
  if (py::isinstance<py::sequence>(obj)) {
    nlohmann::json j = nlohmann::json::array();
    for (auto item : obj.cast<py::sequence>()) j.push_back(py_to_json(item));
    return j;
  }
  throw py::type_error("cannot convert object to JSON");
}

Example example_from_py(py::handle obj) {
  const py::dict d = obj.cast<py::dict>();
  Example e;
  e.instruction = d["instruction"].cast<std::string>();
  if (d.contains("context") && !d["context"].is_none())
    e.context = d["context"].cast<std::string>();
  e.response = d["response"].cast<std::string>();
  return e;
}

py::dict example_to_py(const Example& e) {
  py::dict d;
  d["instruction"] = e.instruction;
  d["context"] = e.context;
  d["response"] = e.response;
  return d;
}

Corpus corpus_from_py(py::sequence seq, SplitTag tag) {
  Corpus c;
  c.split_tag = tag;
  for (auto item : seq) c.examples.push_back(example_from_py(item));
  return c;
}

py::list corpus_to_py(const Corpus& c) {
  py::list out;
  for (const Example& e : c.examples) out.append(example_to_py(e));
  return out;
}

py::dict row_to_py(const ResultRow& r) {
  py::dict d;
  d["model"] = r.model;
  d["params"] = r.params;
  d["technique"] = r.technique;
  d["mem_fraction"] = r.mem_fraction;
  d["r1_train"] = r.rouge.rouge1_train;
  d["r1_test"] = r.rouge.rouge1_test;
  d["r2_train"] = r.rouge.rouge2_train;
  d["r2_test"] = r.rouge.rouge2_test;
  d["rl_train"] = r.rouge.rougeL_train;
  d["rl_test"] = r.rouge.rougeL_test;
  d["seed"] = r.seed;
  return d;
}

TrainedModel load_model(const std::string& path) { return load_checkpoint(path); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "distillation memorization audit toolkit";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const IoError& e) {
      PyErr_SetString(PyExc_OSError, e.what());
    } catch (const Error& e) {
      PyErr_SetString(PyExc_RuntimeError, e.what());
    }
  });

  m.attr("BOS") = Tokenizer::kBos;
  m.attr("EOS") = Tokenizer::kEos;
  m.attr("SEP") = Tokenizer::kSep;
  m.attr("PAD") = Tokenizer::kPad;
  m.attr("VOCAB_SIZE") = Tokenizer::kVocabSize;

  m.def(
      "encode", [](const std::string& text) { return Tokenizer().encode(text); },
      py::arg("text"), "Byte-level token ids for a string.");
  m.def(
      "decode",
      [](const std::vector<int>& ids) {
        return Tokenizer().decode(std::span<const int>(ids));
      },
      py::arg("ids"), "String for a token id sequence; specials render as markers.");

  m.def(
      "render_prompt",
      [](const std::string& instruction, const std::string& context) {
        return render_prompt(Example{instruction, context, "x"}).first;
      },
      py::arg("instruction"), py::arg("context") = "",
      "The canonical instruction/context prompt rendering.");

  m.def(
      "synth_corpus",
      [](std::size_t n, std::uint64_t seed) { return corpus_to_py(synth_corpus(n, seed)); },
      py::arg("n"), py::arg("seed"), "Deterministic synthetic instruction corpus.");
  m.def(
      "save_jsonl",
      [](py::sequence examples, const std::string& path) {
        save_jsonl(corpus_from_py(examples, SplitTag::train), path);
      },
      py::arg("examples"), py::arg("path"));
  m.def(
      "load_jsonl",
      [](const std::string& path, int max_seq_len) {
        LoadReport report;
        const Corpus c = load_jsonl(path, SplitTag::train, max_seq_len, &report);
        return py::make_tuple(corpus_to_py(c), report.diagnostics);
      },
      py::arg("path"), py::arg("max_seq_len") = 256,
      "Loads a JSONL corpus; returns (examples, rejection diagnostics).");

  m.def("rouge_n", &rouge_n, py::arg("reference"), py::arg("candidate"), py::arg("n"));
  m.def("rouge_l", &rouge_l, py::arg("reference"), py::arg("candidate"),
        py::arg("beta") = 1.0);
  m.def(
      "lcs_length",
      [](const std::vector<int>& xs, const std::vector<int>& ys) {
        return lcs_length(std::span<const int>(xs), std::span<const int>(ys));
      },
      py::arg("xs"), py::arg("ys"));
  m.def("rouge_tokenize", &rouge_tokenize, py::arg("text"));
  m.def(
      "exact_match",
      [](const std::vector<int>& generated, const std::vector<int>& target, int k) {
        const auto [matched, prefix] =
            exact_match(std::span<const int>(generated), std::span<const int>(target), k);
        return py::make_tuple(matched, prefix);
      },
      py::arg("generated"), py::arg("target"), py::arg("k"),
      "Verbatim k-prefix match; returns (matched, common_prefix_len).");

  m.def(
      "param_count", [](const std::string& arch) { return param_count(arch_config(arch)); },
      py::arg("arch"), "Parameter count of a named architecture (T, S-L, S-M, S-S).");

  m.def(
      "train_run",
      [](const std::string& arch, py::dict regime, py::sequence train_examples,
         const std::string& out_path, std::optional<std::string> teacher_path,
         std::optional<py::sequence> pretrain_examples) {
        const ModelConfig config = arch_config(arch);
        const TrainingRegime reg = regime_from_json(py_to_json(regime));
        const Corpus corpus = corpus_from_py(train_examples, SplitTag::train);
        std::optional<TrainedModel> teacher;
        if (teacher_path) teacher = load_checkpoint(*teacher_path);
        std::optional<Corpus> pretrain;
        if (pretrain_examples)
          pretrain = corpus_from_py(*pretrain_examples, SplitTag::pretrain);
        const TrainedModel model =
            train(config, teacher ? &*teacher : nullptr, corpus, reg,
                  pretrain ? &*pretrain : nullptr);
        save_checkpoint(out_path, model);
        py::dict out;
        out["params"] = param_count(config);
        out["loss_curve"] = model.loss_curve;
        return out;
      },
      py::arg("arch"), py::arg("regime"), py::arg("train_examples"), py::arg("out_path"),
      py::arg("teacher_path") = std::nullopt, py::arg("pretrain_examples") = std::nullopt,
      "Trains one run and writes its checkpoint; returns params and the loss curve.");

  m.def(
      "generate",
      [](const std::string& checkpoint_path, const std::string& instruction,
         const std::string& context, int max_new_tokens) {
        const TrainedModel model = load_model(checkpoint_path);
        const Tokenizer tok;
        const EncodedExample enc = encode_example({instruction, context, "x"}, tok);
        const GenerationBudget budget{max_new_tokens, Tokenizer::kEos};
        const std::vector<int> out = greedy_decode(model.params, enc.prompt_ids, budget);
        return tok.decode(out);
      },
      py::arg("checkpoint_path"), py::arg("instruction"), py::arg("context") = "",
      py::arg("max_new_tokens") = 64, "Greedy completion for an instruction.");

  m.def(
      "audit",
      [](const std::string& checkpoint_path, py::sequence examples, int k,
         std::optional<std::size_t> sample, std::uint64_t seed) {
        const TrainedModel model = load_model(checkpoint_path);
        const Corpus corpus = corpus_from_py(examples, SplitTag::train);
        AuditConfig cfg;
        cfg.k = k;
        cfg.sample_size = sample;
        cfg.seed = seed;
        const StepModel sm = make_step_model(model.params);
        const AuditReport rep = memorization_fraction(sm, corpus, cfg);
        py::dict out;
        out["fraction"] = rep.fraction;
        out["n_evaluated"] = rep.n_evaluated;
        out["n_memorized"] = rep.n_memorized;
        out["n_skipped"] = rep.n_skipped;
        return out;
      },
      py::arg("checkpoint_path"), py::arg("examples"), py::arg("k") = 50,
      py::arg("sample") = std::nullopt, py::arg("seed") = 0,
      "Memorization fraction of a checkpoint over a corpus.");

  m.def(
      "rouge_report",
      [](const std::string& checkpoint_path, py::sequence train_examples,
         py::sequence test_examples) {
        const TrainedModel model = load_model(checkpoint_path);
        const StepModel sm = make_step_model(model.params);
        const RougeReport rep =
            rouge_report(sm, corpus_from_py(train_examples, SplitTag::train),
                         corpus_from_py(test_examples, SplitTag::test));
        py::dict out;
        out["r1_train"] = rep.rouge1_train;
        out["r2_train"] = rep.rouge2_train;
        out["rl_train"] = rep.rougeL_train;
        out["r1_test"] = rep.rouge1_test;
        out["r2_test"] = rep.rouge2_test;
        out["rl_test"] = rep.rougeL_test;
        out["n_train"] = rep.n_train;
        out["n_test"] = rep.n_test;
        return out;
      },
      py::arg("checkpoint_path"), py::arg("train_examples"), py::arg("test_examples"),
      "Greedy-decode ROUGE averages for both splits.");

  m.def(
      "run_experiment",
      [](py::dict config, const std::string& out_dir, bool resume) {
        const ExperimentConfig cfg = experiment_config_from_json(py_to_json(config));
        const ExperimentResult res = run_experiment(cfg, out_dir, resume);
        py::list rows;
        for (const ResultRow& r : res.rows) rows.append(row_to_py(r));
        py::dict out;
        out["rows"] = rows;
        out["failures"] = res.failures;
        return out;
      },
      py::arg("config"), py::arg("out_dir"), py::arg("resume") = false,
      "Full teacher/students pipeline from a config dict; writes reports to out_dir.");
}
