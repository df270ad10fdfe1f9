#include "stem/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace stem {

using nlohmann::json;

json model_config_to_json(const ModelConfig& config) {
    json j;
    j["n_layers"] = config.n_layers;
    j["d_model"] = config.d_model;
    j["d_ff"] = config.d_ff;
    j["vocab"] = config.vocab;
    j["heads"] = config.heads;
    j["max_len"] = config.max_len;
    j["tie_embeddings"] = config.tie_embeddings;
    j["rope_base"] = config.rope_base;
    json variants = json::array();
    for (Variant v : config.variants) variants.push_back(variant_name(v));
    j["variants"] = variants;
    j["moe"] = {{"experts", config.moe.experts},
                {"top_r", config.moe.top_r},
                {"d_ff_expert", config.moe.d_ff_expert},
                {"hash_seed", config.moe.hash_seed}};
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig config;
    config.n_layers = j.at("n_layers").get<std::size_t>();
    config.d_model = j.at("d_model").get<std::size_t>();
    config.d_ff = j.at("d_ff").get<std::size_t>();
    config.vocab = j.at("vocab").get<std::size_t>();
    config.heads = j.at("heads").get<std::size_t>();
    config.max_len = j.at("max_len").get<std::size_t>();
    config.tie_embeddings = j.at("tie_embeddings").get<bool>();
    config.rope_base = j.value("rope_base", 10000.0);
    for (const auto& v : j.at("variants")) {
        config.variants.push_back(variant_from_name(v.get<std::string>()));
    }
    if (j.contains("moe")) {
        const auto& m = j.at("moe");
        config.moe.experts = m.value("experts", 0);
        config.moe.top_r = m.value("top_r", 1);
        config.moe.d_ff_expert = m.value("d_ff_expert", std::size_t{0});
        config.moe.hash_seed = m.value("hash_seed", std::uint64_t{0});
    }
    return config;
}

namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;

void write_u32(std::ostream& out, std::uint32_t v) {
    char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(static_cast<char>(kDtypeF64));
    write_u64(out, t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) write_u64(out, t.dim(i));
    for (double v : t.values()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64(out, bits);
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t step,
                     const std::map<std::string, Tensor>& extra) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(kMagic, 8);
    write_u32(out, kVersion);
    json blob;
    blob["config"] = model_config_to_json(model.config);
    blob["step"] = step;
    const std::string text = blob.dump();
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    model.visit_params([&](const std::string& name, const Tensor& t) { write_tensor(out, name, t); });
    for (const auto& [name, t] : extra) write_tensor(out, name, t);
    if (!out) throw IoError("short write to '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw IoError("'" + path + "' is not a checkpoint file");
    }
    const std::uint32_t version = read_u32(in);
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t blob_len = read_u64(in);
    std::string text(blob_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(blob_len));
    if (!in) throw IoError("truncated checkpoint header");
    json blob = json::parse(text);

    LoadedCheckpoint loaded;
    loaded.step = blob.value("step", std::uint64_t{0});
    const ModelConfig config = model_config_from_json(blob.at("config"));

    std::map<std::string, Tensor> tensors;
    for (;;) {
        std::uint64_t name_len = read_u64(in);
        if (in.eof()) break;
        if (!in) throw IoError("truncated tensor record");
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const int dtype = in.get();
        if (dtype != kDtypeF64) throw IoError("unsupported dtype tag in '" + name + "'");
        const std::uint64_t rank = read_u64(in);
        std::vector<std::size_t> shape(rank);
        std::size_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            shape[i] = read_u64(in);
            count *= shape[i];
        }
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint64_t bits = read_u64(in);
            std::memcpy(&values[i], &bits, 8);
        }
        if (!in) throw IoError("truncated values in '" + name + "'");
        tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
    }

    // Rebuild the model skeleton (hash routers come from the config seed) and
    // fill parameters by name.
    loaded.model = build_model(config, /*seed=*/0);
    loaded.model.visit_params([&](const std::string& name, Tensor& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
        if (it->second.shape() != t.shape()) {
            throw IoError("checkpoint tensor '" + name + "' has the wrong shape");
        }
        t = it->second;
        tensors.erase(it);
    });
    if (loaded.model.config.tie_embeddings) loaded.model.lm_head = loaded.model.embed;
    loaded.extra = std::move(tensors);
    return loaded;
}

}  // namespace stem
