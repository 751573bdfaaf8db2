#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "polygonizer/adam.hpp"
#include "polygonizer/model.hpp"

namespace polygonizer {

inline constexpr char kCheckpointMagic[4] = {'P', 'L', 'G', 'Z'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout, all integers little-endian:
//   "PLGZ" | u32 version | u64 blob length | canonical JSON blob
//   | u32 tensor count | per tensor: u32 name length, name, u8 dtype (0 = f32),
//     u32 rank, u64 dims[rank], u64 offset, u64 byte length
//   | raw tensor data, offsets relative to the start of this section
// The blob holds {"model": ModelConfig, "training": metadata, "optimizer":
// Adam hyperparameters and step, or null}. Adam moments are stored as
// tensors named "adam.m/<param>" and "adam.v/<param>".

struct LoadedCheckpoint {
    Polygonizer<float> model;
    std::optional<tc::AdamState<float>> optimizer;
    nlohmann::json training;
};

void save_checkpoint(const std::filesystem::path& path, const Polygonizer<float>& model,
                     const tc::AdamState<float>* optimizer, const nlohmann::json& training);

/// Serialized bytes, identical to what save_checkpoint writes.
std::string checkpoint_bytes(const Polygonizer<float>& model, const tc::AdamState<float>* optimizer,
                             const nlohmann::json& training);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

}  // namespace polygonizer
