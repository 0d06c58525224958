#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include <json.hpp>

#include "mpbm/models.hpp"

namespace mpbm {

// Flat parameter container: "MPBMCKPT" magic, u32 little-endian header length,
// JSON header (format version, kind, architecture, seed, step, tensor table),
// then the tensors' doubles in table order, little-endian.
struct CheckpointMeta {
  int format_version = 1;
  std::string kind;  // "model" | "generator" | "discriminator"
  ModelSpec spec;
  uint64_t seed = 0;
  int64_t step = 0;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const ParamSet& params);
std::pair<CheckpointMeta, ParamSet> load_checkpoint(const std::string& path);

}  // namespace mpbm
