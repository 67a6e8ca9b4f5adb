// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "funnelprune/model.hpp"

namespace fp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/**
 * Model checkpoint.
 *
 * Layout: "FPCK", u32 version, u64 manifest length, the manifest as compact
 * JSON, then one FPTN record per layer parameter in layer_params order. All
 * integers are little-endian. `meta` is free-form stage bookkeeping (stage
 * name, parent hash, seed) stored inside the manifest.
 */
struct Checkpoint {
    ModelGraph graph;
    nlohmann::json meta = nlohmann::json::object();
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

/// Writes the checkpoint and returns the SHA-256 of the written bytes.
std::string write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace fp
