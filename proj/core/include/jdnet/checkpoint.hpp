#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jdnet/image.hpp"

namespace jdnet {

/// Malformed, truncated or incompatible checkpoint file.
class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

/// One named array as stored on disk.
struct ArrayRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  friend bool operator==(const ArrayRecord&, const ArrayRecord&) = default;
};

/// Layout (little-endian):
///   "JDN1" | version u32 | parameter count u32 | parameter records
///   | optimizer record count u32 | optimizer records | epoch u32 | seed u64
///   | config length u32 | config JSON (utf-8)
/// A record is: name length u16 | name | rank u8 | dims u32 x rank | f32 x prod(dims).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::vector<ArrayRecord> parameters;
  std::vector<ArrayRecord> optimizer;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::string config_json;

  [[nodiscard]] const ArrayRecord* find_parameter(const std::string& name) const;
  [[nodiscard]] const ArrayRecord* find_optimizer(const std::string& name) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);

/// Throws CheckpointError with the byte offset of the first problem.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes through a temporary file and renames, so a failed save never
/// clobbers an existing checkpoint.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace jdnet
