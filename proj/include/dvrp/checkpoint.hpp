#pragma once

// Binary checkpoint container for ParamVectors.
//
// Layout (all integers little-endian):
//   "DVRPCKPT" | u32 version | u32 blockCount
//   blockCount x { u16 nameLength | UTF-8 name | u64 offset | u64 length }
//   u32 fieldCount
//   fieldCount x { u16 nameLength | UTF-8 name | u32 value }
//   all values as f64, in offset order

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvrp/gradcore.hpp"

namespace dvrp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointField {
  std::string name;
  std::uint32_t value = 0;
  bool operator==(const CheckpointField&) const = default;
};

struct Checkpoint {
  grad::ParamVector params;
  std::vector<CheckpointField> fields;

  std::optional<std::uint32_t> field(std::string_view name) const;
  void setField(std::string name, std::uint32_t value);
};

std::vector<std::uint8_t> encodeCheckpoint(const Checkpoint& ckpt);
Checkpoint decodeCheckpoint(std::span<const std::uint8_t> bytes);

void writeCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint readCheckpoint(const std::filesystem::path& path);

}  // namespace dvrp
