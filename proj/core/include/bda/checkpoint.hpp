#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bda/backbone.hpp"
#include "bda/tensor.hpp"

namespace bda {

// .bdack binary layout, little-endian:
//   magic "BDACK", version u32,
//   stage u32, epoch u32, seed u64, config_hash u64 (fnv1a of config_text),
//   config_len u32, config_text bytes,
//   entry_count u32, then per entry:
//     name_len u32, name bytes, rank u32, extents u32[rank], values f64[numel]
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint32_t stage = 0;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::string config_text;  // key=value lines, same syntax as --config files
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> entries;
};

// Fully parses and validates the file; truncation, bad magic and unknown
// versions are rejected (DataError).
LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

// Copies entries into the store. Every entry must exist with a matching
// shape; validation happens before any value is written, so a failed apply
// leaves the model untouched.
void apply_checkpoint(const LoadedCheckpoint& ck, ParamStore& params);

}  // namespace bda
