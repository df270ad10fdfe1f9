#include "stem/editing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stem {
namespace edit {

const char* scheme_name(SchemeKind kind) {
    switch (kind) {
        case SchemeKind::equal_swap: return "equal_swap";
        case SchemeKind::pad_left: return "pad_left";
        case SchemeKind::pad_right: return "pad_right";
        case SchemeKind::copy: return "copy";
        case SchemeKind::subset: return "subset";
        case SchemeKind::average: return "average";
    }
    return "equal_swap";
}

Scheme scheme_from_name(const std::string& name) {
    for (SchemeKind k : {SchemeKind::equal_swap, SchemeKind::pad_left, SchemeKind::pad_right,
                         SchemeKind::copy, SchemeKind::subset, SchemeKind::average}) {
        if (name == scheme_name(k)) return Scheme{k, {}};
    }
    throw ConfigError("unknown edit scheme '" + name + "'");
}

namespace {

void check_ids(const Model& model, std::span<const std::int32_t> ids, const char* what) {
    for (std::int32_t t : ids) {
        if (t < 0 || static_cast<std::size_t>(t) >= model.config.vocab) {
            throw IndexError(std::string(what) + " id " + std::to_string(t) +
                             " outside vocabulary");
        }
    }
}

Directive row_directive(std::int32_t token) {
    Directive d;
    d.row_of = token;
    return d;
}

}  // namespace

EditPlan plan_edit(const Model& model, std::span<const std::int32_t> source_ids,
                   std::span<const std::int32_t> target_ids, const Scheme& scheme) {
    const std::size_t n_s = source_ids.size(), n_t = target_ids.size();
    if (n_s == 0 || n_t == 0) throw ConfigError("plan_edit: empty source or target span");
    check_ids(model, source_ids, "source");
    check_ids(model, target_ids, "target");

    EditPlan plan;
    plan.scheme = scheme_name(scheme.kind);
    switch (scheme.kind) {
        case SchemeKind::equal_swap: {
            if (n_s != n_t) throw ConfigError("equal_swap requires equally long spans");
            for (std::int32_t t : target_ids) plan.directives.push_back(row_directive(t));
            break;
        }
        case SchemeKind::pad_left:
        case SchemeKind::pad_right: {
            if (n_s <= n_t) throw ConfigError("padding requires a longer source span");
            std::vector<Directive> pads(n_s - n_t, row_directive(kPadToken));
            if (scheme.kind == SchemeKind::pad_left) {
                plan.directives = std::move(pads);
                for (std::int32_t t : target_ids) plan.directives.push_back(row_directive(t));
            } else {
                for (std::int32_t t : target_ids) plan.directives.push_back(row_directive(t));
                plan.directives.insert(plan.directives.end(), pads.begin(), pads.end());
            }
            break;
        }
        case SchemeKind::copy: {
            if (n_s <= n_t) throw ConfigError("copying requires a longer source span");
            const std::size_t repeats = n_s / n_t;
            for (std::size_t i = 0; i < n_t; ++i) {
                for (std::size_t r = 0; r < repeats; ++r) {
                    plan.directives.push_back(row_directive(target_ids[i]));
                }
            }
            while (plan.directives.size() < n_s) {
                plan.directives.push_back(row_directive(target_ids[n_t - 1]));
            }
            break;
        }
        case SchemeKind::subset: {
            if (n_s >= n_t) throw ConfigError("subset selection requires a longer target span");
            std::vector<std::size_t> idx = scheme.subset_indices;
            if (idx.empty()) {
                for (std::size_t i = n_t - n_s; i < n_t; ++i) idx.push_back(i);
            }
            if (idx.size() != n_s) throw ConfigError("subset must pick one target per source position");
            std::set<std::size_t> seen;
            for (std::size_t i : idx) {
                if (i >= n_t) throw ConfigError("subset index out of target range");
                if (!seen.insert(i).second) throw ConfigError("subset indices must be distinct");
            }
            for (std::size_t i : idx) plan.directives.push_back(row_directive(target_ids[i]));
            break;
        }
        case SchemeKind::average: {
            Directive mean;
            for (std::size_t li : model.config.table_layers()) {
                const Tensor& table = model.layers[li].table;
                std::vector<double> avg(table.dim(1), 0.0);
                for (std::int32_t t : target_ids) {
                    for (std::size_t f = 0; f < avg.size(); ++f) {
                        avg[f] += table.at(static_cast<std::size_t>(t), f);
                    }
                }
                for (double& v : avg) v /= static_cast<double>(n_t);
                mean.vectors[li] = std::move(avg);
            }
            plan.directives.assign(n_s, mean);
            break;
        }
    }
    return plan;
}

EditedModel apply_edit(const Model& model, std::span<const std::size_t> prompt_positions,
                       const EditPlan& plan, const std::set<std::size_t>& layer_subset) {
    if (prompt_positions.size() != plan.directives.size()) {
        throw ConfigError("apply_edit: one prompt position per directive required");
    }
    const auto table_layers = model.config.table_layers();
    if (table_layers.empty()) throw ConfigError("apply_edit: model has no table layers");

    EditedModel edited;
    edited.base = &model;
    edited.overrides.layers = layer_subset;
    for (std::size_t i = 0; i < plan.directives.size(); ++i) {
        const Directive& dir = plan.directives[i];
        auto& per_layer = edited.overrides.vectors[prompt_positions[i]];
        for (std::size_t li : table_layers) {
            if (!layer_subset.empty() && layer_subset.count(li) == 0) continue;
            if (dir.is_vector()) {
                const auto it = dir.vectors.find(li);
                if (it == dir.vectors.end()) {
                    throw ConfigError("directive has no vector for layer " + std::to_string(li));
                }
                per_layer[li] = it->second;
            } else {
                const Tensor& table = model.layers[li].table;
                if (dir.row_of < 0 || static_cast<std::size_t>(dir.row_of) >= table.dim(0)) {
                    throw IndexError("directive row id outside table");
                }
                const std::size_t width = table.dim(1);
                std::vector<double> row(width);
                for (std::size_t f = 0; f < width; ++f) {
                    row[f] = table.at(static_cast<std::size_t>(dir.row_of), f);
                }
                per_layer[li] = std::move(row);
            }
        }
    }
    return edited;
}

Tensor forward_edited(const EditedModel& edited, std::span<const std::int32_t> tokens) {
    ForwardOptions opt;
    opt.overrides = &edited.overrides;
    return forward(*edited.base, tokens, opt);
}

Model materialize(const EditedModel& edited, std::span<const std::int32_t> prompt) {
    Model out = edited.base->clone();
    for (const auto& [pos, per_layer] : edited.overrides.vectors) {
        if (pos >= prompt.size()) throw IndexError("materialize: position beyond prompt");
        const auto token = static_cast<std::size_t>(prompt[pos]);
        for (const auto& [li, row] : per_layer) {
            Tensor& table = out.layers[li].table;
            if (row.size() != table.dim(1)) throw ShapeError("materialize: row width mismatch");
            std::copy(row.begin(), row.end(), table.values().data() + token * table.dim(1));
        }
    }
    return out;
}

Tensor remap_execute(const Model& model, std::span<const std::int32_t> prompt,
                     const std::map<std::size_t, std::int32_t>& position_to_token) {
    std::vector<std::int32_t> stem_tokens(prompt.begin(), prompt.end());
    for (const auto& [pos, token] : position_to_token) {
        if (pos >= stem_tokens.size()) throw IndexError("remap position beyond prompt");
        if (token < 0 || static_cast<std::size_t>(token) >= model.config.vocab) {
            throw IndexError("remap token outside vocabulary");
        }
        stem_tokens[pos] = token;
    }
    ForwardOptions opt;
    opt.stem_tokens = &stem_tokens;
    return forward(model, prompt, opt);
}

std::vector<std::pair<std::int32_t, double>> topk_next(std::span<const double> logits,
                                                       std::size_t k) {
    if (k < 1) throw ConfigError("topk_next requires k >= 1");
    if (k > logits.size()) throw ConfigError("topk_next: k exceeds the vocabulary");
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    std::vector<double> probs(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - m);
        z += probs[i];
    }
    for (double& p : probs) p /= z;
    std::vector<std::int32_t> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
        return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    std::vector<std::pair<std::int32_t, double>> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.emplace_back(order[i], probs[static_cast<std::size_t>(order[i])]);
    }
    return out;
}

}  // namespace edit
}  // namespace stem
