#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tlvm/model.h"

// TLVM checkpoint layout, all integers little-endian:
//
//   "TLVM"                      4-byte magic
//   u32 version                 kCheckpointVersion
//   u32 n, n bytes              UTF-8 JSON config document (model config + lineage)
//   u32 tensor count
//   per tensor:
//     u32 n, n bytes            name
//     u8  dtype                 1 = float64
//     u32 rank, rank x u64      extents
//     numel x f64               payload
namespace tlvm {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat64 = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& bundle);
// Throws kBadMagic, kVersionMismatch, kTruncatedTable (naming the tensor) or
// kSchemaMismatch when a tensor does not fit the stored config.
ModelBundle deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

// Config document helpers, shared with run manifests.
std::string config_document(const ModelBundle& bundle);

}  // namespace tlvm
