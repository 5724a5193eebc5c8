#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "strokenext/training.hpp"

namespace strokenext {

// File layout (little-endian):
//   magic "SNXTCKPT" | u32 version | u32 reserved | u64 config fingerprint |
//   u64 payload bytes | u32 crc32(payload) | u32 reserved | payload
// The payload serializes the model config, tensors, optimizer, scheduler and
// run metadata. Written to a temporary file and renamed into place.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const training::Checkpoint& ckpt, const std::filesystem::path& path);

// Throws IoError (unreadable), IntegrityError (bad magic, truncation, checksum)
// or FingerprintMismatch when `expected` is given and differs.
training::Checkpoint load_checkpoint(const std::filesystem::path& path,
                                     const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace strokenext
