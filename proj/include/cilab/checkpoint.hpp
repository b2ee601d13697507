// Copyright (C) 2026 The cilab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cilab/model.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

namespace cilab {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes `<path>` (JSON manifest) and `<path with .bin extension>` (params,
/// then Adam m, then Adam v, as little-endian float64 in manifest order).
void save_checkpoint(const EmbeddingNet& net, const AdamState& state, const std::filesystem::path& path);
/// Inverse of save_checkpoint. Throws PersistenceError on any inconsistency.
std::pair<EmbeddingNet, AdamState> load_checkpoint(const std::filesystem::path& path);

/// Path of the binary blob paired with a manifest.
std::filesystem::path blob_path(const std::filesystem::path& manifest);

// Little-endian float64 codec shared by checkpoint and dataset blobs.
std::array<std::uint8_t, 8> encode_f64_le(double v);
double decode_f64_le(std::span<const std::uint8_t, 8> bytes);
void write_f64_le(std::ostream& os, std::span<const double> values);
std::vector<double> read_f64_le(const std::filesystem::path& path);

}  // namespace cilab
