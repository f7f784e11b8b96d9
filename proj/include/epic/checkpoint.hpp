#pragma once

#include <cstdint>
#include <string>

#include "epic/model.hpp"

namespace epic {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Writes <prefix>.manifest (text: config header + one line per tensor with
// name, shape, dtype, byte offset) and <prefix>.blob (flat little-endian
// float32). load -> save round-trips byte-identically.
void save_checkpoint(const std::string& prefix, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(const std::string& prefix);

// FNV-1a over the serialized float32 blob; identifies the exact weights.
std::uint64_t fingerprint(const ModelParams<float>& params);

}  // namespace epic
