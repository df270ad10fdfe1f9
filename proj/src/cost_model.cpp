#include "stem/cost_model.hpp"

#include <unordered_set>

namespace stem {
namespace cost {

double prefill_flops(const ArchHyperparams& h, FfnKind kind) {
    const double mat = kind == FfnKind::base ? 3.0 : 2.0;
    return h.B * (mat * h.d_ff * h.d * h.L + h.d_ff * h.L);
}

double train_flops(const ArchHyperparams& h, FfnKind kind) {
    const double attn = 4.0 * h.L * h.d * h.d + 2.0 * h.L * h.L * h.d;
    const double ffn = (kind == FfnKind::base ? 3.0 : 2.0) * h.L * h.d * h.d_ff;
    return h.B * (attn + ffn);
}

double saving_fraction(double d, double d_ff, double L) {
    if (d <= 0 || d_ff <= 0 || L <= 0) throw ConfigError("saving_fraction needs positive inputs");
    return d_ff / (4.0 * d + 2.0 * L + 3.0 * d_ff);
}

double decode_mem(const ArchHyperparams& h, FfnKind kind) {
    const double mat = kind == FfnKind::base ? 3.0 : 2.0;
    return h.B * (4.0 * h.d * h.d + 2.0 * h.L * h.d + mat * h.d * h.d_ff);
}

namespace {

std::uint64_t unique_count(std::span<const std::int32_t> ids) {
    std::unordered_set<std::int32_t> uniq(ids.begin(), ids.end());
    return uniq.size();
}

}  // namespace

std::uint64_t comm_cost(Phase phase, std::span<const std::int32_t> token_ids, std::size_t d_ff) {
    const std::uint64_t base = unique_count(token_ids) * static_cast<std::uint64_t>(d_ff);
    return phase == Phase::training ? 2 * base : base;
}

std::uint64_t activated_params(std::size_t table_layer_count, std::size_t d_ff,
                               std::span<const std::int32_t> tokens) {
    return static_cast<std::uint64_t>(table_layer_count) * d_ff * unique_count(tokens);
}

double roi(double avg_accuracy, double total_train_flops) {
    if (total_train_flops <= 0) throw ConfigError("roi needs positive training compute");
    return avg_accuracy / total_train_flops;
}

double roi_normalized(double accuracy, double flops, double base_accuracy, double base_flops) {
    return roi(accuracy, flops) / roi(base_accuracy, base_flops);
}

CostReport make_report(const ArchHyperparams& h, std::span<const std::int32_t> batch_tokens,
                       std::span<const std::int32_t> decode_tokens) {
    CostReport r;
    r.h = h;
    r.prefill_flops_base = prefill_flops(h, FfnKind::base);
    r.prefill_flops_stem = prefill_flops(h, FfnKind::stem);
    r.train_flops_base = train_flops(h, FfnKind::base);
    r.train_flops_stem = train_flops(h, FfnKind::stem);
    r.decode_mem_base = decode_mem(h, FfnKind::base);
    r.decode_mem_stem = decode_mem(h, FfnKind::stem);
    r.decode_param_bytes_base = r.decode_mem_base * 8.0;
    r.decode_param_bytes_stem = r.decode_mem_stem * 8.0;
    r.prefill_delta = r.prefill_flops_base - r.prefill_flops_stem;
    r.train_delta = r.train_flops_base - r.train_flops_stem;
    r.decode_delta = r.decode_mem_base - r.decode_mem_stem;
    r.saving = saving_fraction(h.d, h.d_ff, h.L);
    const auto d_ff = static_cast<std::size_t>(h.d_ff);
    r.comm_elements_prefill = comm_cost(Phase::prefill, batch_tokens, d_ff);
    r.comm_elements_decode = comm_cost(Phase::decode, decode_tokens, d_ff);
    r.comm_elements_training = comm_cost(Phase::training, batch_tokens, d_ff);
    return r;
}

MeasuredFlops measured_flops(const Model& model,
                             const std::vector<std::vector<std::int32_t>>& batch) {
    FlopCounter counter;
    for (const auto& tokens : batch) {
        ForwardOptions opt;
        opt.flops = &counter;
        forward(model, tokens, opt);
    }
    MeasuredFlops out;
    for (const auto& layer : counter.per_layer) {
        out.ffn_per_layer.push_back(layer.ffn);
        out.attn_per_layer.push_back(layer.attn);
    }
    out.head = counter.head;
    out.total = counter.total();
    return out;
}

}  // namespace cost
}  // namespace stem
