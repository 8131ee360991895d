#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include <json.hpp>

#include "ribac/mask.hpp"
#include "ribac/model.hpp"
#include "ribac/triggers.hpp"

namespace ribac {

// File layout: magic line, 8-byte little-endian header length, JSON header,
// raw payload. Float tensors are little-endian float32; masks are bit-packed,
// least significant bit first.
inline constexpr const char* kCheckpointMagic = "RIBAC-CKPT-v1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelSpec spec;
  ModelWeights weights;
  std::optional<PruneMask> mask;
  std::optional<ImportanceScores> scores;
  std::optional<TriggerBank> bank;
  std::uint64_t seed = 0;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ribac
