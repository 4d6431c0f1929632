#pragma once

// Checkpoint container.
//
//   bytes 0..7    magic "FTLABCKP"
//   bytes 8..11   u32 format version (1), little-endian
//   bytes 12..19  u64 manifest length M, little-endian
//   next M bytes  UTF-8 JSON manifest
//   remainder     array payloads, little-endian, in manifest order
//
// Manifest fields: "config" (ViTConfig fields), "metadata" (string map), and
// "groups": [{"id", "kind": "model"|"extra", "arrays": [{"name", "shape",
// "dtype": "f32"|"f64", "offset", "nbytes"}]}]. Offsets are relative to the
// start of the payload section. Round-trips are bit-exact.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftlab/params.hpp"

namespace ftlab {

template <typename T>
struct BasicCheckpoint {
    BasicParamSet<T> params;
    /// Groups that are not part of the encoder/head model (SSL heads, MAE decoder).
    std::vector<ParamGroup<T>> extras;

    const ParamGroup<T>* extra(const std::string& id) const {
        for (const auto& g : extras)
            if (g.id == id) return &g;
        return nullptr;
    }
};

using Checkpoint = BasicCheckpoint<float>;

nlohmann::json config_to_json(const ViTConfig& c);
ViTConfig config_from_json(const nlohmann::json& j);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const BasicCheckpoint<T>& ckpt);

/// Throws InputError on a malformed or truncated file, or when the stored dtype is not T.
template <typename T = float>
BasicCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Only the manifest, without reading payloads.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

/// Hex SHA-256 of the file contents.
std::string file_sha256(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

}  // namespace ftlab
