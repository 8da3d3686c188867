#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "da2net/backbone.hpp"

namespace da2 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// "DA2C" layout: magic, u32 version, u32 tensor count, then per tensor a u16
/// name length, the name, u32 rank, u32 extents and the f32 little-endian
/// payload. A u64 FNV-1a of every preceding byte closes the file.
std::vector<std::uint8_t> serialize_checkpoint(const NamedTensors& tensors);
NamedTensors parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

/// Parameters followed by BN running buffers, in visit order.
NamedTensors network_state(Network<float>& net);

/// Overwrites parameters and buffers; names, order and shapes must match.
void restore_network_state(Network<float>& net, const NamedTensors& state, const std::string& origin = "<memory>");

/// Writes to "<path>.partial" and renames into place once complete.
void save_checkpoint(Network<float>& net, const std::filesystem::path& path);
void load_checkpoint(Network<float>& net, const std::filesystem::path& path);

/// Atomic file write used for every artifact a run produces.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace da2
