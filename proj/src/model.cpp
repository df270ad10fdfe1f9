#include "stem/model.hpp"
#include <cmath>

#include <algorithm>
#include <unordered_set>

namespace stem {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::dense: return "dense";
        case Variant::stem: return "stem";
        case Variant::stem_gate: return "stem_gate";
        case Variant::stem_dagger: return "stem_dagger";
        case Variant::moe: return "moe";
        case Variant::hash_moe: return "hash_moe";
    }
    return "dense";
}

Variant variant_from_name(const std::string& name) {
    if (name == "dense") return Variant::dense;
    if (name == "stem") return Variant::stem;
    if (name == "stem_gate") return Variant::stem_gate;
    if (name == "stem_dagger") return Variant::stem_dagger;
    if (name == "moe") return Variant::moe;
    if (name == "hash_moe") return Variant::hash_moe;
    throw ConfigError("unknown layer variant '" + name + "'");
}

void ModelConfig::validate() const {
    if (n_layers == 0) throw ConfigError("model needs at least one layer");
    if (vocab < 2) throw ConfigError("vocabulary must have at least two tokens");
    if (d_model == 0 || d_ff == 0) throw ConfigError("model widths must be positive");
    if (heads == 0 || d_model % heads != 0) {
        throw ConfigError("head count must divide model width");
    }
    const std::size_t head_dim = d_model / heads;
    if (head_dim % 2 != 0) throw ConfigError("head width must be even for rotary positions");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (variants.size() != n_layers) {
        throw ConfigError("variant list length must equal layer count");
    }
    const bool uses_moe =
        std::any_of(variants.begin(), variants.end(),
                    [](Variant v) { return v == Variant::moe || v == Variant::hash_moe; });
    if (uses_moe && moe.experts < 1) {
        throw ConfigError("MoE layers require a positive expert count");
    }
}

std::vector<std::size_t> ModelConfig::table_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        if (variants[i] == Variant::stem || variants[i] == Variant::stem_gate ||
            variants[i] == Variant::stem_dagger) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<std::size_t> select_placement(std::size_t n_layers, const PlacementPolicy& policy) {
    if (n_layers == 0) throw ConfigError("select_placement: no layers");
    std::vector<std::size_t> out;
    switch (policy.kind) {
        case PlacementPolicy::Kind::ratio_third:
            for (std::size_t i = 2; i < n_layers; i += 3) out.push_back(i);
            break;
        case PlacementPolicy::Kind::ratio_half:
            for (std::size_t i = 1; i < n_layers; i += 2) out.push_back(i);
            break;
        case PlacementPolicy::Kind::full_except_first:
            for (std::size_t i = 1; i < n_layers; ++i) out.push_back(i);
            break;
        case PlacementPolicy::Kind::explicit_set:
            out = policy.explicit_layers;
            std::sort(out.begin(), out.end());
            out.erase(std::unique(out.begin(), out.end()), out.end());
            for (std::size_t i : out) {
                if (i >= n_layers) throw ConfigError("explicit placement layer out of range");
            }
            break;
    }
    if (out.empty()) throw ConfigError("placement selected no layers");
    return out;
}

std::vector<Variant> variants_for(std::size_t n_layers, const PlacementPolicy& policy) {
    std::vector<Variant> variants(n_layers, Variant::dense);
    for (std::size_t i : select_placement(n_layers, policy)) variants[i] = policy.variant;
    return variants;
}

namespace {

// Width-scaled truncated-normal init: std = 1/sqrt(fan_in). A fixed small
// std (the large-model convention) leaves desk-scale models too close to
// zero signal to train.
Tensor init_matrix(std::vector<std::size_t> shape, Rng& rng) {
    const double std = 1.0 / std::sqrt(static_cast<double>(shape.back()));
    return Tensor::randn(std::move(shape), rng, std, /*truncated=*/true);
}

Tensor ones(std::size_t n) {
    Tensor t({n});
    for (double& v : t.values()) v = 1.0;
    return t;
}

std::size_t moe_expert_width(const ModelConfig& cfg) {
    if (cfg.moe.d_ff_expert != 0) return cfg.moe.d_ff_expert;
    return hash_moe_expert_width(cfg.d_model, cfg.d_ff, cfg.vocab, cfg.moe.experts);
}

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    Rng rng(seed);
    const std::size_t d = config.d_model, d_ff = config.d_ff, v = config.vocab;

    m.embed = init_matrix({v, d}, rng);
    m.lm_head = config.tie_embeddings ? m.embed : init_matrix({v, d}, rng);
    m.final_norm_gain = ones(d);

    const std::size_t w_e = [&] {
        const bool uses_moe = std::any_of(
            config.variants.begin(), config.variants.end(),
            [](Variant x) { return x == Variant::moe || x == Variant::hash_moe; });
        return uses_moe ? moe_expert_width(config) : 0;
    }();

    for (std::size_t i = 0; i < config.n_layers; ++i) {
        LayerParams layer;
        layer.variant = config.variants[i];
        layer.attn_norm_gain = ones(d);
        layer.ffn_norm_gain = ones(d);
        layer.attn = AttentionParams{init_matrix({d, d}, rng), init_matrix({d, d}, rng),
                                     init_matrix({d, d}, rng), init_matrix({d, d}, rng),
                                     static_cast<int>(config.heads)};
        switch (layer.variant) {
            case Variant::dense:
                layer.ffn = SwiGluParams{init_matrix({d_ff, d}, rng), init_matrix({d_ff, d}, rng),
                                         init_matrix({d, d_ff}, rng)};
                break;
            case Variant::stem:
                layer.ffn.w_gate = init_matrix({d_ff, d}, rng);
                layer.ffn.w_down = init_matrix({d, d_ff}, rng);
                layer.table = init_matrix({v, d_ff}, rng);
                break;
            case Variant::stem_gate:
                layer.ffn.w_up = init_matrix({d_ff, d}, rng);
                layer.ffn.w_down = init_matrix({d, d_ff}, rng);
                layer.table = init_matrix({v, d_ff}, rng);
                break;
            case Variant::stem_dagger:
                layer.ffn = SwiGluParams{init_matrix({d_ff, d}, rng), init_matrix({d_ff, d}, rng),
                                         init_matrix({d, d_ff}, rng)};
                layer.table = init_matrix({v, d_ff}, rng);
                break;
            case Variant::moe: {
                for (int e = 0; e < config.moe.experts; ++e) {
                    layer.moe.experts.push_back(
                        SwiGluParams{init_matrix({w_e, d}, rng), init_matrix({w_e, d}, rng),
                                     init_matrix({d, w_e}, rng)});
                }
                layer.moe.router =
                    init_matrix({static_cast<std::size_t>(config.moe.experts), d}, rng);
                layer.moe.top_r = config.moe.top_r;
                break;
            }
            case Variant::hash_moe: {
                for (int e = 0; e < config.moe.experts; ++e) {
                    layer.experts.push_back(
                        SwiGluParams{init_matrix({w_e, d}, rng), init_matrix({w_e, d}, rng),
                                     init_matrix({d, w_e}, rng)});
                }
                layer.hash = build_hash_router(v, config.moe.experts, config.moe.hash_seed);
                break;
            }
        }
        m.layers.push_back(std::move(layer));
    }
    return m;
}

namespace {

template <typename ModelT, typename Fn>
void visit_params_impl(ModelT& m, const Fn& fn) {
    fn("embed.weight", m.embed);
    if (!m.config.tie_embeddings) fn("lm_head.weight", m.lm_head);
    fn("final_norm.gain", m.final_norm_gain);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& layer = m.layers[i];
        const std::string prefix = "layers." + std::to_string(i) + ".";
        fn(prefix + "attn_norm.gain", layer.attn_norm_gain);
        fn(prefix + "ffn_norm.gain", layer.ffn_norm_gain);
        fn(prefix + "attn.w_q", layer.attn.w_q);
        fn(prefix + "attn.w_k", layer.attn.w_k);
        fn(prefix + "attn.w_v", layer.attn.w_v);
        fn(prefix + "attn.w_o", layer.attn.w_o);
        switch (layer.variant) {
            case Variant::dense:
            case Variant::stem_dagger:
                fn(prefix + "ffn.w_gate", layer.ffn.w_gate);
                fn(prefix + "ffn.w_up", layer.ffn.w_up);
                fn(prefix + "ffn.w_down", layer.ffn.w_down);
                if (layer.variant == Variant::stem_dagger) fn(prefix + "ffn.table", layer.table);
                break;
            case Variant::stem:
                fn(prefix + "ffn.w_gate", layer.ffn.w_gate);
                fn(prefix + "ffn.w_down", layer.ffn.w_down);
                fn(prefix + "ffn.table", layer.table);
                break;
            case Variant::stem_gate:
                fn(prefix + "ffn.w_up", layer.ffn.w_up);
                fn(prefix + "ffn.w_down", layer.ffn.w_down);
                fn(prefix + "ffn.table", layer.table);
                break;
            case Variant::moe:
                fn(prefix + "ffn.router", layer.moe.router);
                for (std::size_t e = 0; e < layer.moe.experts.size(); ++e) {
                    const std::string ep = prefix + "ffn.expert." + std::to_string(e) + ".";
                    fn(ep + "w_gate", layer.moe.experts[e].w_gate);
                    fn(ep + "w_up", layer.moe.experts[e].w_up);
                    fn(ep + "w_down", layer.moe.experts[e].w_down);
                }
                break;
            case Variant::hash_moe:
                for (std::size_t e = 0; e < layer.experts.size(); ++e) {
                    const std::string ep = prefix + "ffn.expert." + std::to_string(e) + ".";
                    fn(ep + "w_gate", layer.experts[e].w_gate);
                    fn(ep + "w_up", layer.experts[e].w_up);
                    fn(ep + "w_down", layer.experts[e].w_down);
                }
                break;
        }
    }
}

}  // namespace

void Model::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params_impl(*this, fn);
}

void Model::visit_params(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_params_impl(*this, fn);
}

Model Model::clone() const {
    Model out = *this;
    std::map<std::string, Tensor> copies;
    out.visit_params([&](const std::string& name, Tensor& t) {
        Tensor c = t.clone();
        copies.emplace(name, c);
        t = c;
    });
    if (out.config.tie_embeddings) out.lm_head = out.embed;
    return out;
}

namespace {

// FFN dispatch for one layer. `stem_ids` are the ids used for table lookups
// (already remapped, if a remap is in effect).
Tensor ffn_out(const Ctx& ctx, const LayerParams& layer, std::size_t layer_idx, const Tensor& h,
               std::span<const std::int32_t> stem_ids, const ForwardOptions& opt) {
    const bool has_table = layer.variant == Variant::stem ||
                           layer.variant == Variant::stem_gate ||
                           layer.variant == Variant::stem_dagger;
    Tensor addr;
    if (has_table) {
        if (opt.trace != nullptr) {
            auto& rows = opt.trace->rows_per_layer[layer_idx];
            rows.insert(rows.end(), stem_ids.begin(), stem_ids.end());
        }
        addr = ops::gather_rows(ctx, layer.table, stem_ids);
        if (opt.overrides != nullptr &&
            (opt.overrides->layers.empty() || opt.overrides->layers.count(layer_idx) > 0)) {
            if (ctx.tape != nullptr) {
                throw ConfigError("table overrides are inference-only");
            }
            for (const auto& [pos, per_layer] : opt.overrides->vectors) {
                if (pos >= addr.dim(0)) throw IndexError("override position beyond prompt");
                const auto it = per_layer.find(layer_idx);
                if (it == per_layer.end()) continue;
                if (it->second.size() != addr.dim(1)) {
                    throw ShapeError("override vector width does not match table");
                }
                std::copy(it->second.begin(), it->second.end(),
                          addr.values().data() + pos * addr.dim(1));
            }
        }
    }
    switch (layer.variant) {
        case Variant::dense:
            return swiglu_forward(ctx, h, layer.ffn);
        case Variant::stem: {
            Tensor gate = ops::silu(ctx, ops::linear(ctx, h, layer.ffn.w_gate));
            return ops::linear(ctx, ops::mul(ctx, gate, addr), layer.ffn.w_down);
        }
        case Variant::stem_gate: {
            Tensor gate = ops::silu(ctx, addr);
            Tensor up = ops::linear(ctx, h, layer.ffn.w_up);
            return ops::linear(ctx, ops::mul(ctx, gate, up), layer.ffn.w_down);
        }
        case Variant::stem_dagger: {
            Tensor gate = ops::silu(ctx, ops::linear(ctx, h, layer.ffn.w_gate));
            Tensor up = ops::add(ctx, ops::linear(ctx, h, layer.ffn.w_up), addr);
            return ops::linear(ctx, ops::mul(ctx, gate, up), layer.ffn.w_down);
        }
        case Variant::moe:
            return moe_forward(ctx, h, layer.moe);
        case Variant::hash_moe:
            return hash_moe_forward(ctx, h, stem_ids, layer.experts, layer.hash);
    }
    throw ConfigError("unreachable ffn variant");
}

}  // namespace

Tensor forward(const Model& model, std::span<const std::int32_t> tokens,
               const ForwardOptions& opt) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) throw ShapeError("forward on an empty token sequence");
    if (tokens.size() > cfg.max_len) {
        throw ShapeError("sequence of " + std::to_string(tokens.size()) +
                         " tokens exceeds max_len " + std::to_string(cfg.max_len));
    }
    for (std::int32_t t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
            throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    std::span<const std::int32_t> stem_ids = tokens;
    if (opt.stem_tokens != nullptr) {
        if (opt.tape != nullptr) throw ConfigError("table-id remapping is inference-only");
        if (opt.stem_tokens->size() != tokens.size()) {
            throw ShapeError("remapped table ids must match the prompt length");
        }
        stem_ids = *opt.stem_tokens;
    }

    Ctx ctx{opt.tape, opt.flops};
    Tensor x = ops::gather_rows(ctx, model.embed, tokens);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerParams& layer = model.layers[i];
        if (ctx.flops != nullptr) {
            ctx.flops->begin_layer(static_cast<int>(i));
            ctx.flops->category = FlopCounter::Category::attn;
        }
        Tensor a = causal_attention(ctx, ops::rmsnorm(ctx, x, layer.attn_norm_gain), layer.attn,
                                    opt.pos0);
        x = ops::add(ctx, x, a);
        if (ctx.flops != nullptr) ctx.flops->category = FlopCounter::Category::ffn;
        Tensor h = ops::rmsnorm(ctx, x, layer.ffn_norm_gain);
        if (opt.capture_ffn_input != nullptr && opt.capture_layer == i) {
            *opt.capture_ffn_input = h.clone();
        }
        Tensor f = ffn_out(ctx, layer, i, h, stem_ids, opt);
        x = ops::add(ctx, x, f);
    }
    if (ctx.flops != nullptr) ctx.flops->category = FlopCounter::Category::head;
    Tensor normed = ops::rmsnorm(ctx, x, model.final_norm_gain);
    Tensor logits = ops::linear(ctx, normed, model.lm_head);
    if (ctx.flops != nullptr) ctx.flops->category = FlopCounter::Category::other;
    return logits;
}

std::size_t count_total_params(const Model& model) {
    std::size_t total = 0;
    model.visit_params([&](const std::string&, const Tensor& t) { total += t.size(); });
    return total;
}

ParamCensus count_params(const Model& model, std::span<const std::int32_t> tokens) {
    ParamCensus census;
    census.total = count_total_params(model);
    std::unordered_set<std::int32_t> uniq(tokens.begin(), tokens.end());
    census.active = census.total;
    for (const LayerParams& layer : model.layers) {
        if (layer.variant == Variant::stem || layer.variant == Variant::stem_gate ||
            layer.variant == Variant::stem_dagger) {
            census.table_entries += layer.table.size();
            // Only the looked-up rows count as activated.
            census.active -= layer.table.size();
            census.active += uniq.size() * layer.table.dim(1);
        } else if (layer.variant == Variant::hash_moe) {
            std::unordered_set<std::int32_t> touched;
            for (std::int32_t t : uniq) {
                touched.insert(layer.hash.mapping[static_cast<std::size_t>(t)]);
            }
            for (std::size_t e = 0; e < layer.experts.size(); ++e) {
                if (touched.count(static_cast<std::int32_t>(e)) == 0) {
                    census.active -= layer.experts[e].w_gate.size() +
                                     layer.experts[e].w_up.size() +
                                     layer.experts[e].w_down.size();
                }
            }
        }
    }
    return census;
}

}  // namespace stem
