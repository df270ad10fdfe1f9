#include "stem/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stem {

std::vector<std::size_t> HashRouter::bucket_sizes() const {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(num_experts), 0);
    for (std::int32_t e : mapping) ++sizes[static_cast<std::size_t>(e)];
    return sizes;
}

Tensor swiglu_forward(const Ctx& ctx, const Tensor& x, const SwiGluParams& p) {
    Tensor gate = ops::silu(ctx, ops::linear(ctx, x, p.w_gate));
    Tensor up = ops::linear(ctx, x, p.w_up);
    return ops::linear(ctx, ops::mul(ctx, gate, up), p.w_down);
}

Tensor stem_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                    const StemTable& table, const Tensor& w_gate, const Tensor& w_down) {
    if (token_ids.size() != x.dim(0)) throw ShapeError("stem_forward: one token id per row");
    Tensor gate = ops::silu(ctx, ops::linear(ctx, x, w_gate));
    Tensor addr = ops::gather_rows(ctx, table.table, token_ids);
    return ops::linear(ctx, ops::mul(ctx, gate, addr), w_down);
}

Tensor stem_gate_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                         const StemTable& table, const Tensor& w_up, const Tensor& w_down) {
    if (token_ids.size() != x.dim(0)) throw ShapeError("stem_gate_forward: one token id per row");
    Tensor gate = ops::silu(ctx, ops::gather_rows(ctx, table.table, token_ids));
    Tensor up = ops::linear(ctx, x, w_up);
    return ops::linear(ctx, ops::mul(ctx, gate, up), w_down);
}

Tensor stem_dagger_forward(const Ctx& ctx, const Tensor& x,
                           std::span<const std::int32_t> token_ids, const StemDaggerParams& p) {
    if (token_ids.size() != x.dim(0)) throw ShapeError("stem_dagger_forward: one token id per row");
    Tensor gate = ops::silu(ctx, ops::linear(ctx, x, p.ffn.w_gate));
    Tensor up = ops::linear(ctx, x, p.ffn.w_up);
    Tensor addr = ops::add(ctx, up, ops::gather_rows(ctx, p.table, token_ids));
    return ops::linear(ctx, ops::mul(ctx, gate, addr), p.ffn.w_down);
}

namespace {

// Top-r selection per row over softmax weights; exactly equal weights go to
// the lower expert index.
std::vector<std::vector<std::int32_t>> select_top_r(const Tensor& probs, int top_r) {
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    std::vector<std::vector<std::int32_t>> rows_for_expert(k);
    std::vector<std::size_t> order(k);
    for (std::size_t i = 0; i < n; ++i) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return probs.at(i, a) > probs.at(i, b);
        });
        for (int r = 0; r < top_r; ++r) {
            rows_for_expert[order[static_cast<std::size_t>(r)]].push_back(
                static_cast<std::int32_t>(i));
        }
    }
    return rows_for_expert;
}

}  // namespace

Tensor moe_forward(const Ctx& ctx, const Tensor& x, const MoeParams& p) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    const std::size_t k = p.experts.size();
    if (k == 0) throw ConfigError("moe_forward: no experts");
    if (p.top_r < 1 || static_cast<std::size_t>(p.top_r) > k) {
        throw ConfigError("moe_forward: top_r out of range");
    }
    Tensor logits = ops::linear(ctx, x, p.router);
    Tensor probs = ops::softmax_rows(ctx, logits);

    const auto rows_for_expert = select_top_r(probs, p.top_r);

    // Renormalize the kept weights; the selection itself carries no gradient.
    Tensor mask({n, k});
    for (std::size_t e = 0; e < k; ++e) {
        for (std::int32_t row : rows_for_expert[e]) mask.at(static_cast<std::size_t>(row), e) = 1.0;
    }
    Tensor kept = ops::mul(ctx, probs, mask);
    Tensor weights = ops::div_rows(ctx, kept, ops::row_sum(ctx, kept));

    Tensor y({n, d});
    for (std::size_t e = 0; e < k; ++e) {
        const auto& rows = rows_for_expert[e];
        if (rows.empty()) continue;
        Tensor xe = ops::gather_rows(ctx, x, rows);
        Tensor fe = swiglu_forward(ctx, xe, p.experts[e]);
        Tensor full = ops::scatter_rows(ctx, fe, rows, n);
        Tensor coef = ops::slice_cols(ctx, weights, e, 1);
        y = ops::add(ctx, y, ops::scale_rows(ctx, full, coef));
    }
    return y;
}

Tensor hash_moe_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                        const std::vector<SwiGluParams>& experts, const HashRouter& router) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (token_ids.size() != n) throw ShapeError("hash_moe_forward: one token id per row");
    if (experts.size() != static_cast<std::size_t>(router.num_experts)) {
        throw ConfigError("hash_moe_forward: expert count does not match router");
    }
    std::vector<std::vector<std::int32_t>> rows_for_expert(experts.size());
    for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t t = token_ids[i];
        if (t < 0 || static_cast<std::size_t>(t) >= router.mapping.size()) {
            throw IndexError("hash_moe_forward: token id " + std::to_string(t) +
                             " outside vocabulary");
        }
        rows_for_expert[static_cast<std::size_t>(router.mapping[static_cast<std::size_t>(t)])]
            .push_back(static_cast<std::int32_t>(i));
    }
    if (experts.size() == 1) {
        return swiglu_forward(ctx, x, experts[0]);
    }
    Tensor y({n, d});
    for (std::size_t e = 0; e < experts.size(); ++e) {
        const auto& rows = rows_for_expert[e];
        if (rows.empty()) continue;
        Tensor xe = ops::gather_rows(ctx, x, rows);
        Tensor fe = swiglu_forward(ctx, xe, experts[e]);
        y = ops::add(ctx, y, ops::scatter_rows(ctx, fe, rows, n));
    }
    return y;
}

HashRouter build_hash_router(std::size_t vocab, int num_experts, std::uint64_t seed) {
    if (num_experts < 1) throw ConfigError("hash router needs at least one expert");
    if (static_cast<std::size_t>(num_experts) > vocab) {
        throw ConfigError("hash router: more experts than tokens");
    }
    std::vector<std::int32_t> perm(vocab);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    for (std::size_t i = vocab; i > 1; --i) {
        std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    }
    HashRouter router;
    router.num_experts = num_experts;
    router.mapping.resize(vocab);
    for (std::size_t t = 0; t < vocab; ++t) {
        router.mapping[t] = perm[t] % num_experts;
    }
    return router;
}

HashRouter modulo_hash_router(std::size_t vocab, int num_experts) {
    if (num_experts < 1) throw ConfigError("hash router needs at least one expert");
    if (static_cast<std::size_t>(num_experts) > vocab) {
        throw ConfigError("hash router: more experts than tokens");
    }
    HashRouter router;
    router.num_experts = num_experts;
    router.mapping.resize(vocab);
    for (std::size_t t = 0; t < vocab; ++t) {
        router.mapping[t] = static_cast<std::int32_t>(t % static_cast<std::size_t>(num_experts));
    }
    return router;
}

std::size_t hash_moe_expert_width(std::size_t d, std::size_t d_ff, std::size_t vocab,
                                  int experts) {
    if (experts < 1) throw ConfigError("expert width: need at least one expert");
    // STEM layer FFN parameters: V*d_ff (table) + 2*d*d_ff (gate, down).
    // Hash-MoE layer: K * 3 * d * w.
    const double stem_params =
        static_cast<double>(vocab) * static_cast<double>(d_ff) + 2.0 * static_cast<double>(d) * static_cast<double>(d_ff);
    const double w = stem_params / (3.0 * static_cast<double>(d) * static_cast<double>(experts));
    const auto rounded = static_cast<std::size_t>(std::llround(w));
    return rounded < 1 ? 1 : rounded;
}

Tensor causal_attention(const Ctx& ctx, const Tensor& x, const AttentionParams& p,
                        std::size_t pos0) {
    const std::size_t d = x.dim(1);
    if (p.heads < 1 || d % static_cast<std::size_t>(p.heads) != 0) {
        throw ConfigError("attention: head count must divide model width");
    }
    const std::size_t hd = d / static_cast<std::size_t>(p.heads);
    Tensor q = ops::rope(ctx, ops::linear(ctx, x, p.w_q), hd, pos0);
    Tensor k = ops::rope(ctx, ops::linear(ctx, x, p.w_k), hd, pos0);
    Tensor v = ops::linear(ctx, x, p.w_v);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * hd;
        Tensor qh = ops::slice_cols(ctx, q, off, hd);
        Tensor kh = ops::slice_cols(ctx, k, off, hd);
        Tensor vh = ops::slice_cols(ctx, v, off, hd);
        Tensor scores = ops::scale(ctx, ops::linear(ctx, qh, kh), inv_sqrt);
        Tensor probs = ops::causal_softmax(ctx, scores);
        heads.push_back(ops::matmul(ctx, probs, vh));
    }
    Tensor merged = p.heads == 1 ? heads[0] : ops::concat_cols(ctx, heads);
    return ops::linear(ctx, merged, p.w_o);
}

}  // namespace stem
