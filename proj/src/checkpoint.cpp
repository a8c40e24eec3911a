#include "distaudit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace distaudit {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json regime_to_json(const TrainingRegime& r) {
  return {{"kind", regime_kind_name(r.kind)},
          {"epochs", r.epochs},
          {"batch_size", r.batch_size},
          {"seed", r.seed},
          {"learning_rate", r.learning_rate},
          {"word_kd_mix", r.word_kd_mix},
          {"kd_temperature", r.kd_temperature},
          {"seqkd_beam_width", r.seqkd_beam_width},
          {"rkld",
           {{"rollouts_per_prompt", r.rkld.rollouts_per_prompt},
            {"pt_loss_weight", r.rkld.pt_loss_weight},
            {"importance_clip", r.rkld.importance_clip},
            {"max_rollout_tokens", r.rkld.max_rollout_tokens}}}};
}

TrainingRegime regime_from_json(const nlohmann::json& j) {
  TrainingRegime r;
  try {
    r.kind = regime_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("epochs")) r.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) r.batch_size = j.at("batch_size").get<int>();
    if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("learning_rate")) r.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("word_kd_mix")) r.word_kd_mix = j.at("word_kd_mix").get<double>();
    if (j.contains("kd_temperature")) r.kd_temperature = j.at("kd_temperature").get<double>();
    if (j.contains("seqkd_beam_width")) r.seqkd_beam_width = j.at("seqkd_beam_width").get<int>();
    if (j.contains("rkld")) {
      const nlohmann::json& k = j.at("rkld");
      if (k.contains("rollouts_per_prompt"))
        r.rkld.rollouts_per_prompt = k.at("rollouts_per_prompt").get<int>();
      if (k.contains("pt_loss_weight"))
        r.rkld.pt_loss_weight = k.at("pt_loss_weight").get<double>();
      if (k.contains("importance_clip"))
        r.rkld.importance_clip = k.at("importance_clip").get<double>();
      if (k.contains("max_rollout_tokens"))
        r.rkld.max_rollout_tokens = k.at("max_rollout_tokens").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training regime: ") + e.what());
  }
  r.validate();
  return r;
}

void save_checkpoint(const std::string& path, const TrainedModel& model) {
  model.config.validate();
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"created_by", kToolVersion},
                                 {"config", config_to_json(model.config)},
                                 {"regime", regime_to_json(model.regime)},
                                 {"seed", model.regime.seed}};
  const std::string header_text = header.dump();

  std::string blob;
  blob += kCheckpointMagic;
  put_u32(blob, static_cast<std::uint32_t>(header_text.size()));
  blob += header_text;
  const auto tensors = model.params.all();
  std::size_t count = 0;
  for (const auto* t : tensors) count += t->numel();
  blob.reserve(blob.size() + count * 4);
  for (const auto* t : tensors)
    for (std::size_t i = 0; i < t->numel(); ++i) put_f32(blob, (*t->data)[i]);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

TrainedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  const std::size_t size = blob.size();

  if (size < 8 || std::memcmp(blob.data(), kCheckpointMagic, 4) != 0)
    throw IntegrityError("'" + path + "' is not a checkpoint (bad magic)");
  const std::uint32_t header_len = get_u32(p + 4);
  if (size < 8 + static_cast<std::size_t>(header_len))
    throw IntegrityError("'" + path + "': truncated header");

  nlohmann::json header =
      nlohmann::json::parse(blob.begin() + 8, blob.begin() + 8 + header_len, nullptr, false);
  if (header.is_discarded() || !header.is_object())
    throw IntegrityError("'" + path + "': header is not valid JSON");
  if (!header.contains("format_version") || !header.at("format_version").is_number_integer())
    throw IntegrityError("'" + path + "': header lacks a format version");
  const int version = header.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion)
    throw IntegrityError("'" + path + "': unsupported format version " +
                         std::to_string(version));

  TrainedModel model;
  try {
    model.config = config_from_json(header.at("config"));
    model.regime = regime_from_json(header.at("regime"));
  } catch (const Error& e) {
    throw IntegrityError("'" + path + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("'" + path + "': " + e.what());
  }

  const std::size_t expected = static_cast<std::size_t>(param_count(model.config));
  const std::size_t payload = size - 8 - header_len;
  if (payload != expected * 4)
    throw IntegrityError("'" + path + "': payload holds " + std::to_string(payload / 4) +
                         " values, config requires " + std::to_string(expected));

  model.params = init_zero<float>(model.config);
  const unsigned char* cur = p + 8 + header_len;
  for (auto* t : model.params.all())
    for (std::size_t i = 0; i < t->numel(); ++i, cur += 4) (*t->data)[i] = get_f32(cur);
  return model;
}

}  // namespace distaudit
