// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file checkpoints. Layout, all integers little-endian:
//
//   "CMIVLD01"            8-byte magic
//   u16 version           currently 1
//   u32 n, n bytes        UTF-8 JSON config
//   u32 count             number of arrays
//   per array:
//     u32 n, n bytes      name
//     u32 rank, rank*u32  dims
//     prod(dims)*f32      values

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "model.hpp"
#include "purifier.hpp"

CMIVLD_NS_BEGIN

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'I', 'V', 'L', 'D', '0', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

using NamedArrays = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  nlohmann::json config;
  NamedArrays arrays;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt,
                                            std::uint16_t version = kCheckpointVersion);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin);

/// Writes through a temporary file, fsyncs it and renames it into place.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

void save_model(const std::string& path, const ModelConfig& config, const TinyLvlmParams& params);
std::pair<ModelConfig, TinyLvlmParams> load_model(const std::string& path);

void save_purifier(const std::string& path, const Purifier& purifier);
Purifier load_purifier(const std::string& path);

CMIVLD_NS_END
