#pragma once

// Checkpoint archive.
//
//   8 bytes   magic "MNARCKPT"
//   u32       format version
//   u64 + n   manifest JSON (UTF-8)
//   u64       tensor count
//   per tensor: u32 name length, name bytes, u64 rows, u64 cols,
//               rows*cols f64 in row-major order
//
// Integers and doubles are little-endian. The manifest carries the model
// configuration, data dimensions, config hash, stage, epoch and a metric
// snapshot; normalization statistics travel as tensors so they reload
// bit-exactly.

#include "mnarrl/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mnarrl::checkpoint {

using ad::Matrix;

inline constexpr std::uint32_t kFormatVersion = 1;

struct Loaded {
  model::ModelBundle bundle;
  nlohmann::json manifest;
};

std::vector<std::uint8_t> encode(const model::ModelBundle& bundle, const nlohmann::json& manifest);
Loaded decode(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const model::ModelBundle& bundle,
          const nlohmann::json& manifest);
Loaded load(const std::filesystem::path& path);

}  // namespace mnarrl::checkpoint
