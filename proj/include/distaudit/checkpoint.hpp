#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "distaudit/distill.hpp"

namespace distaudit {

// Checkpoint container: "DAUD" magic, a little-endian u32 header length, a
// UTF-8 JSON header (format version, model config, regime summary, seed),
// then the parameters as little-endian float32 in canonical order. The
// header carries no timestamps, so writing the same model twice produces
// byte-identical files.

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointMagic = "DAUD";
inline constexpr const char* kToolVersion = "distaudit 0.1.0";

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json regime_to_json(const TrainingRegime& regime);
TrainingRegime regime_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const TrainedModel& model);

// Loads and validates a checkpoint. Magic, version, header shape, parameter
// count, and payload extent are all checked; violations raise
// IntegrityError. The loss curve is not stored and comes back empty.
TrainedModel load_checkpoint(const std::string& path);

}  // namespace distaudit
