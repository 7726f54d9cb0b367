#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include "symkfcv/model.hpp"

namespace symkfcv {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layout: 8-byte magic "SYMKFCV\0", u32 version, u64 header length, JSON
/// header (config, config hash, vocabulary, tensor names and shapes), then
/// every parameter as a little-endian IEEE-754 double in tensor order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);

/// Rejects bad magic/version, a stored config hash that does not match the
/// stored config, a vocabulary or tensor table that differs from what the
/// config implies, and truncated payloads. When expected_hash is given, a
/// checkpoint whose config hash differs is rejected with both hashes named.
ModelParams load_checkpoint(const std::filesystem::path& path,
                            std::optional<std::uint64_t> expected_hash = std::nullopt);

}  // namespace symkfcv
