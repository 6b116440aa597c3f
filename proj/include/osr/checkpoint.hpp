#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "osr/common.hpp"

namespace osr {

// Binary checkpoint:
//   8 bytes  magic "OSRCKPT\0"
//   u32      format version
//   u64      metadata length, then UTF-8 JSON metadata
//   u32      tensor count, then per tensor:
//              u32 name length, name bytes, u32 rows, u32 cols, u32 dtype (1 = f32, 2 = f64),
//              row-major data
// All integers little-endian.
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, MatF> tensors;
};

// Writes atomically (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace osr
