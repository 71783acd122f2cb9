#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk training snapshot. Tensor payloads are stored as little-endian f32;
// integer side state (queue cursor, update steps) rides along as small
// tensors, which is exact for the magnitudes involved.
struct CheckpointData {
  std::uint64_t step = 0;
  std::uint64_t rng_seed = 0;  // streams are counter-derived from this
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// Layout: "DLCK", version u32, step u64, rng_seed u64, config blob
// (u32 length + bytes), tensor count u32, then per tensor: name (u32 length +
// bytes), rank u32, extents u64 each, payload f32 each. All little-endian.
void checkpoint_save(const std::string& path, const CheckpointData& data);

// Throws FormatError on bad magic/version, IoError on truncation.
CheckpointData checkpoint_load(const std::string& path);

}  // namespace moco
