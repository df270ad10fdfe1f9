#include "stem/memory_sim.hpp"

#include <algorithm>
#include <cmath>

namespace stem {
namespace sim {

std::pair<std::vector<std::int32_t>, std::vector<std::size_t>> dedup(
    std::span<const std::int32_t> ids) {
    std::vector<std::int32_t> unique;
    std::vector<std::size_t> inverse(ids.size());
    std::unordered_map<std::int32_t, std::size_t> seen;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto [it, inserted] = seen.emplace(ids[i], unique.size());
        if (inserted) unique.push_back(ids[i]);
        inverse[i] = it->second;
    }
    return {std::move(unique), std::move(inverse)};
}

bool LfuCache::touch(std::int32_t token, std::int32_t layer) {
    ++tick_;
    Meta& m = meta_[key(token, layer)];
    if (m.resident) residents_.erase(Order{m.freq, m.tick, token, layer});
    m.freq += 1;
    m.tick = tick_;
    if (!m.resident) return false;
    residents_.insert(Order{m.freq, m.tick, token, layer});
    return true;
}

void LfuCache::insert(std::int32_t token, std::int32_t layer) {
    if (capacity_ == 0) return;
    Meta& m = meta_[key(token, layer)];
    if (m.resident) return;
    if (m.freq == 0) {
        m.freq = 1;
        m.tick = ++tick_;
    }
    if (resident_count_ >= capacity_) {
        const Order victim = *residents_.begin();
        residents_.erase(residents_.begin());
        meta_[key(victim.token, victim.layer)].resident = false;
        --resident_count_;
    }
    m.resident = true;
    ++resident_count_;
    residents_.insert(Order{m.freq, m.tick, token, layer});
}

bool LfuCache::contains(std::int32_t token, std::int32_t layer) const {
    auto it = meta_.find(key(token, layer));
    return it != meta_.end() && it->second.resident;
}

std::vector<std::int32_t> zipf_stream(std::size_t vocab, double s, std::size_t n,
                                      std::uint64_t seed) {
    if (vocab == 0) throw ConfigError("zipf_stream needs a nonempty vocabulary");
    if (s <= 0) throw ConfigError("zipf_stream exponent must be positive");
    std::vector<double> cdf(vocab);
    double acc = 0.0;
    for (std::size_t r = 1; r <= vocab; ++r) {
        acc += std::pow(static_cast<double>(r), -s);
        cdf[r - 1] = acc;
    }
    for (double& c : cdf) c /= acc;
    Rng rng(seed);
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        out[i] = static_cast<std::int32_t>(it - cdf.begin());
    }
    return out;
}

namespace {

double transfer_time(std::uint64_t elements, const TierModel& tier) {
    if (elements == 0) return 0.0;
    return tier.host_latency + static_cast<double>(elements) / tier.host_bandwidth;
}

void finalize_rates(SimReport& r) {
    const std::uint64_t total = r.hits + r.misses;
    r.hit_rate = total == 0 ? 0.0 : static_cast<double>(r.hits) / static_cast<double>(total);
}

}  // namespace

SimReport simulate_prefill(const std::vector<std::vector<std::int32_t>>& batch, LfuCache& cache,
                           const TierModel& tier, std::size_t stem_layers, std::size_t d_ff) {
    SimReport report;
    std::vector<std::int32_t> flat;
    for (const auto& seq : batch) flat.insert(flat.end(), seq.begin(), seq.end());
    auto [unique, inverse] = dedup(flat);
    (void)inverse;

    double transfer_total = 0.0;
    for (std::size_t layer = 0; layer < stem_layers; ++layer) {
        std::uint64_t layer_misses = 0;
        for (std::int32_t t : unique) {
            if (cache.touch(t, static_cast<std::int32_t>(layer))) {
                ++report.hits;
            } else {
                ++report.misses;
                ++layer_misses;
                cache.insert(t, static_cast<std::int32_t>(layer));
            }
        }
        report.elements_transferred += layer_misses * d_ff;
        const double t_l = transfer_time(layer_misses * d_ff, tier);
        transfer_total += t_l;
        // Transfer for layer 0 is fully exposed; later transfers hide behind
        // the previous layer's compute.
        const double exposed = layer == 0 ? t_l : std::max(0.0, t_l - tier.layer_compute_time);
        report.stall_time += exposed;
        report.per_step_stall.push_back(exposed);
    }
    report.total_time = static_cast<double>(stem_layers) * tier.layer_compute_time +
                        report.stall_time;
    report.overlap_fraction =
        transfer_total == 0.0 ? 1.0 : 1.0 - report.stall_time / transfer_total;
    finalize_rates(report);
    report.hit_rate_steady = report.hit_rate;  // a single batch has no warmup window
    return report;
}

SimReport simulate_decode(std::span<const std::int32_t> stream, LfuCache& cache,
                          const TierModel& tier, std::size_t stem_layers, std::size_t d_ff) {
    SimReport report;
    const std::size_t warmup = stream.size() / 10;
    std::uint64_t steady_hits = 0, steady_total = 0;
    double transfer_total = 0.0;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        std::uint64_t step_misses = 0;
        for (std::size_t layer = 0; layer < stem_layers; ++layer) {
            const bool hit = cache.touch(stream[i], static_cast<std::int32_t>(layer));
            if (hit) {
                ++report.hits;
            } else {
                ++report.misses;
                ++step_misses;
                cache.insert(stream[i], static_cast<std::int32_t>(layer));
            }
            if (i >= warmup) {
                ++steady_total;
                if (hit) ++steady_hits;
            }
        }
        report.elements_transferred += step_misses * d_ff;
        // Autoregressive: the fetch cannot start until the previous forward
        // finished, so every transfer is exposed.
        const double t_step = transfer_time(step_misses * d_ff, tier);
        transfer_total += t_step;
        report.stall_time += t_step;
        report.per_step_stall.push_back(t_step);
    }
    report.total_time = static_cast<double>(stream.size()) *
                            static_cast<double>(stem_layers) * tier.layer_compute_time +
                        report.stall_time;
    report.overlap_fraction = transfer_total == 0.0 ? 1.0 : 0.0;
    finalize_rates(report);
    report.hit_rate_steady =
        steady_total == 0 ? 0.0 : static_cast<double>(steady_hits) / static_cast<double>(steady_total);
    return report;
}

MemoryFootprint table_memory_freed(const ModelConfig& config, std::size_t cache_capacity_rows) {
    MemoryFootprint fp;
    const std::uint64_t d = config.d_model, f = config.d_ff;
    std::uint64_t freed = 0;
    for (std::size_t i = 0; i < config.variants.size(); ++i) {
        switch (config.variants[i]) {
            case Variant::dense:
                fp.resident_elements += 3 * d * f;
                break;
            case Variant::stem:
            case Variant::stem_gate:
                fp.resident_elements += 2 * d * f;
                fp.offloaded_elements += config.vocab * f;
                freed += d * f;
                break;
            case Variant::stem_dagger:
                // Keeps all three projections; the table is extra capacity.
                fp.resident_elements += 3 * d * f;
                fp.offloaded_elements += config.vocab * f;
                break;
            case Variant::moe: {
                const std::uint64_t w = config.moe.d_ff_expert != 0
                                            ? config.moe.d_ff_expert
                                            : hash_moe_expert_width(config.d_model, config.d_ff,
                                                                    config.vocab, config.moe.experts);
                fp.resident_elements += 3 * d * w * static_cast<std::uint64_t>(config.moe.experts) +
                                        static_cast<std::uint64_t>(config.moe.experts) * d;
                break;
            }
            case Variant::hash_moe: {
                const std::uint64_t w = config.moe.d_ff_expert != 0
                                            ? config.moe.d_ff_expert
                                            : hash_moe_expert_width(config.d_model, config.d_ff,
                                                                    config.vocab, config.moe.experts);
                fp.resident_elements += 3 * d * w * static_cast<std::uint64_t>(config.moe.experts);
                break;
            }
        }
    }
    const std::uint64_t baseline = static_cast<std::uint64_t>(config.n_layers) * 3 * d * f;
    fp.freed_fraction = baseline == 0 ? 0.0 : static_cast<double>(freed) / static_cast<double>(baseline);
    fp.cache_elements = static_cast<std::uint64_t>(cache_capacity_rows) * f;
    fp.resident_bytes = fp.resident_elements * 8;
    fp.offloaded_bytes = fp.offloaded_elements * 8;
    fp.cache_bytes = fp.cache_elements * 8;
    return fp;
}

}  // namespace sim
}  // namespace stem
