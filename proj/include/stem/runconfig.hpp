#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "stem/model.hpp"
#include "stem/training.hpp"

namespace stem {

// One run = model topology + placement + training schedule + data source.
struct RunConfig {
    ModelConfig model;
    // Applied to fill model.variants when the config gives a placement
    // instead of an explicit per-layer list.
    bool use_placement = false;
    PlacementPolicy placement;

    TrainConfig train;

    std::string corpus_kind = "markov";  // file | markov | country | niah
    std::string corpus_path;             // for file corpora
    std::size_t corpus_tokens = 200000;  // for synthetic corpora
    std::uint64_t corpus_seed = 0;
    std::string tokenizer_mode = "byte";  // byte | word (file corpora)

    std::uint64_t model_seed = 0;
    std::string out_dir = "runs/out";

    void finalize();  // applies placement, validates
};

nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// FNV-1a hash of the canonical JSON dump, as fixed-width hex.
std::string config_hash(const nlohmann::json& j);

// Builds the configured corpus (synthetic kinds or a tokenized file).
std::vector<std::int32_t> build_corpus(const RunConfig& config);

// manifest.json contents for reproducibility: command, config, hash, version.
nlohmann::json make_manifest(const std::string& command, const RunConfig& config);
void write_json(const std::string& path, const nlohmann::json& j);

}  // namespace stem
