#pragma once

#include "dps/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace dps {

// On-disk layout:
//   "DPSM" | u32 LE format version | u32 LE header length | UTF-8 JSON header |
//   raw little-endian float32 tensors, row-major, in manifest order.
// The JSON header holds the ModelConfig, the ordered tensor manifest
// (name + shape) and the user-token vocabulary.
inline constexpr char     kCheckpointMagic[4]     = {'D', 'P', 'S', 'M'};
inline constexpr uint32_t kCheckpointFormatVersion = 1;

void            save_checkpoint(const ModelCheckpoint & checkpoint, const std::filesystem::path & path);
ModelCheckpoint load_checkpoint(const std::filesystem::path & path);

std::string     serialize_checkpoint(const ModelCheckpoint & checkpoint);
ModelCheckpoint deserialize_checkpoint(const std::string & bytes);

} // namespace dps
