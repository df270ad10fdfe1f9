#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stem/model.hpp"

namespace stem {

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Binary checkpoint: magic "STEMCKPT", u32 format version, u64-length-prefixed
// JSON config blob, then one record per tensor: u64 name length, UTF-8 name,
// u8 dtype tag (0 = f64), u64 rank, u64 dims, raw little-endian values.
// Round-trips are bit-exact.
struct LoadedCheckpoint {
    Model model;
    std::uint64_t step = 0;
    std::map<std::string, Tensor> extra;  // non-model tensors (optimizer state)
};

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t step = 0,
                     const std::map<std::string, Tensor>& extra = {});

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace stem
