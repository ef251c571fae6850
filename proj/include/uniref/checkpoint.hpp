#pragma once

#include <cstdint>
#include <string>

#include "uniref/backbone.hpp"

namespace uniref {

inline constexpr const char* kCheckpointMagic = "UNIREFCKPT1";

struct Checkpoint {
  ModelParams params;
  std::int64_t step = 0;
};

/// Container: magic line, one-line JSON header (names, shapes, dtype, config, step, hash), then
/// little-endian float32 payloads in header order. Written to a temporary file and renamed.
void save_checkpoint(const std::string& path, const ModelParams& params, std::int64_t step);

/// Validates magic, shapes, and the content hash of the payload.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace uniref
