#include "stem/runconfig.hpp"

#include <fstream>
#include <sstream>
#include <cstdio>

#include "stem/checkpoint.hpp"
#include "stem/corpus.hpp"
#include "stem/tokenizer.hpp"

namespace stem {

using nlohmann::json;

namespace {

const char* kVersion = "1.0.0";

const char* placement_kind_name(PlacementPolicy::Kind kind) {
    switch (kind) {
        case PlacementPolicy::Kind::ratio_third: return "ratio_third";
        case PlacementPolicy::Kind::ratio_half: return "ratio_half";
        case PlacementPolicy::Kind::full_except_first: return "full_except_first";
        case PlacementPolicy::Kind::explicit_set: return "explicit";
    }
    return "ratio_third";
}

PlacementPolicy::Kind placement_kind_from_name(const std::string& name) {
    if (name == "ratio_third") return PlacementPolicy::Kind::ratio_third;
    if (name == "ratio_half") return PlacementPolicy::Kind::ratio_half;
    if (name == "full_except_first") return PlacementPolicy::Kind::full_except_first;
    if (name == "explicit") return PlacementPolicy::Kind::explicit_set;
    throw ConfigError("unknown placement kind '" + name + "'");
}

}  // namespace

void RunConfig::finalize() {
    if (use_placement) {
        model.variants = variants_for(model.n_layers, placement);
        use_placement = false;
    }
    if (model.variants.empty()) {
        model.variants.assign(model.n_layers, Variant::dense);
    }
    model.validate();
    train.validate();
}

json run_config_to_json(const RunConfig& config) {
    json j;
    j["model"] = model_config_to_json(config.model);
    if (config.use_placement) {
        json p;
        p["kind"] = placement_kind_name(config.placement.kind);
        p["variant"] = variant_name(config.placement.variant);
        if (!config.placement.explicit_layers.empty()) {
            p["layers"] = config.placement.explicit_layers;
        }
        j["placement"] = p;
    }
    j["train"] = {{"peak_lr", config.train.peak_lr},
                  {"schedule",
                   config.train.schedule == TrainConfig::Schedule::cosine ? "cosine" : "linear"},
                  {"warmup_ratio", config.train.warmup_ratio},
                  {"min_lr_factor", config.train.min_lr_factor},
                  {"weight_decay", config.train.weight_decay},
                  {"beta1", config.train.beta1},
                  {"beta2", config.train.beta2},
                  {"batch_size", config.train.batch_size},
                  {"seq_len", config.train.seq_len},
                  {"steps", config.train.steps},
                  {"seed", config.train.seed}};
    j["corpus"] = {{"kind", config.corpus_kind},
                   {"path", config.corpus_path},
                   {"tokens", config.corpus_tokens},
                   {"seed", config.corpus_seed},
                   {"tokenizer", config.tokenizer_mode}};
    j["model_seed"] = config.model_seed;
    j["out_dir"] = config.out_dir;
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig config;
    config.model = model_config_from_json(j.at("model"));
    if (j.contains("placement")) {
        config.use_placement = true;
        const auto& p = j.at("placement");
        config.placement.kind = placement_kind_from_name(p.at("kind").get<std::string>());
        config.placement.variant = variant_from_name(p.value("variant", std::string("stem")));
        if (p.contains("layers")) {
            config.placement.explicit_layers = p.at("layers").get<std::vector<std::size_t>>();
        }
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        config.train.peak_lr = t.value("peak_lr", config.train.peak_lr);
        config.train.schedule = t.value("schedule", std::string("cosine")) == "linear"
                                    ? TrainConfig::Schedule::linear
                                    : TrainConfig::Schedule::cosine;
        config.train.warmup_ratio = t.value("warmup_ratio", config.train.warmup_ratio);
        config.train.min_lr_factor = t.value("min_lr_factor", config.train.min_lr_factor);
        config.train.weight_decay = t.value("weight_decay", config.train.weight_decay);
        config.train.beta1 = t.value("beta1", config.train.beta1);
        config.train.beta2 = t.value("beta2", config.train.beta2);
        config.train.batch_size = t.value("batch_size", config.train.batch_size);
        config.train.seq_len = t.value("seq_len", config.train.seq_len);
        config.train.steps = t.value("steps", config.train.steps);
        config.train.seed = t.value("seed", config.train.seed);
    }
    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        config.corpus_kind = c.value("kind", config.corpus_kind);
        config.corpus_path = c.value("path", config.corpus_path);
        config.corpus_tokens = c.value("tokens", config.corpus_tokens);
        config.corpus_seed = c.value("seed", config.corpus_seed);
        config.tokenizer_mode = c.value("tokenizer", config.tokenizer_mode);
    }
    config.model_seed = j.value("model_seed", config.model_seed);
    config.out_dir = j.value("out_dir", config.out_dir);
    return config;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const json& j) {
    const std::string text = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<std::int32_t> build_corpus(const RunConfig& config) {
    if (config.corpus_kind == "file") {
        Tokenizer tok = Tokenizer::byte_level();
        if (config.tokenizer_mode == "word") {
            std::ifstream in(config.corpus_path, std::ios::binary);
            if (!in) throw IoError("cannot open corpus file '" + config.corpus_path + "'");
            std::ostringstream buf;
            buf << in.rdbuf();
            const std::string text = buf.str();
            tok = Tokenizer::word_level(text, config.model.vocab);
            return tok.encode(text);
        }
        return ingest_corpus(config.corpus_path, tok);
    }
    if (config.corpus_kind == "markov") {
        return corpus::markov(config.corpus_tokens, config.model.vocab, config.corpus_seed);
    }
    if (config.corpus_kind == "country") {
        const std::size_t pairs = (config.model.vocab - corpus::kFirstContentToken) / 2;
        const std::size_t reps = std::max<std::size_t>(1, config.corpus_tokens / (2 * pairs));
        return corpus::country_capital(pairs, reps, config.corpus_seed).tokens;
    }
    if (config.corpus_kind == "niah") {
        const std::size_t instances =
            std::max<std::size_t>(1, config.corpus_tokens / config.train.seq_len);
        return corpus::niah_stream(instances, config.train.seq_len, config.model.vocab,
                                   config.corpus_seed);
    }
    throw ConfigError("unknown corpus kind '" + config.corpus_kind + "'");
}

json make_manifest(const std::string& command, const RunConfig& config) {
    json config_json = run_config_to_json(config);
    json m;
    m["command"] = command;
    m["config"] = config_json;
    m["config_hash"] = config_hash(config_json);
    m["model_seed"] = config.model_seed;
    m["train_seed"] = config.train.seed;
    m["version"] = kVersion;
    return m;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
}

}  // namespace stem
