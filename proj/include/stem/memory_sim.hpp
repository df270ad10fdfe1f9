#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stem/model.hpp"

namespace stem {
namespace sim {

// Unique ids in first-seen order plus the inverse index such that
// unique[inverse[i]] == ids[i].
std::pair<std::vector<std::int32_t>, std::vector<std::size_t>> dedup(
    std::span<const std::int32_t> ids);

// Two-tier timing model in abstract units: a host transfer costs
// host_latency + elements / host_bandwidth; one layer of compute costs
// layer_compute_time.
struct TierModel {
    double host_latency = 1.0;
    double host_bandwidth = 1.0;  // elements per time unit
    double layer_compute_time = 1.0;
};

// Least-frequently-used cache over (token, layer) rows. Capacity bounds the
// resident row payloads; the per-token frequency counters are kept for every
// key ever seen (they are tiny next to the rows), so an evicted row re-enters
// with its full access history. Eviction removes the resident entry with the
// minimum frequency; ties go to the oldest last-access tick, then the lowest
// token id.
class LfuCache {
public:
    explicit LfuCache(std::size_t capacity_rows) : capacity_(capacity_rows) {}

    // Counts the access. Hit: bumps frequency and recency, returns true.
    // Miss: returns false without admitting the row.
    bool touch(std::int32_t token, std::int32_t layer = 0);

    // Admits a missing row at its accumulated frequency, evicting if full.
    // No-op if the row is already resident or capacity is zero.
    void insert(std::int32_t token, std::int32_t layer = 0);

    bool contains(std::int32_t token, std::int32_t layer = 0) const;
    std::size_t size() const { return resident_count_; }
    std::size_t capacity() const { return capacity_; }

private:
    struct Meta {
        std::uint64_t freq = 0;
        std::uint64_t tick = 0;
        bool resident = false;
    };
    struct Order {
        std::uint64_t freq;
        std::uint64_t tick;
        std::int32_t token;
        std::int32_t layer;
        bool operator<(const Order& o) const {
            if (freq != o.freq) return freq < o.freq;
            if (tick != o.tick) return tick < o.tick;
            if (token != o.token) return token < o.token;
            return layer < o.layer;
        }
    };
    static std::uint64_t key(std::int32_t token, std::int32_t layer) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(layer)) << 32) |
               static_cast<std::uint32_t>(token);
    }

    std::size_t capacity_;
    std::size_t resident_count_ = 0;
    std::uint64_t tick_ = 0;
    std::unordered_map<std::uint64_t, Meta> meta_;
    std::set<Order> residents_;
};

// i.i.d. draws over token ids 0..V-1 with P(rank r) ∝ r^-s; token id r-1 has
// rank r.
std::vector<std::int32_t> zipf_stream(std::size_t vocab, double s, std::size_t n,
                                      std::uint64_t seed);

struct SimReport {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    double hit_rate = 0.0;
    double hit_rate_steady = 0.0;  // excluding the first 10% of the trace
    std::uint64_t elements_transferred = 0;
    double total_time = 0.0;
    double stall_time = 0.0;
    double overlap_fraction = 1.0;  // overlapped share of transfer time
    std::vector<double> per_step_stall;
};

// Batched prefill over `stem_layers` table layers: per layer the batch ids
// are deduplicated, hits served from cache, and misses moved in one transfer
// that overlaps the previous layer's compute. The first transfer is fully
// exposed.
SimReport simulate_prefill(const std::vector<std::vector<std::int32_t>>& batch, LfuCache& cache,
                           const TierModel& tier, std::size_t stem_layers, std::size_t d_ff);

// Autoregressive decode: the rows for all table layers of each step's token
// are fetched only after the previous step finishes; no cross-step overlap.
SimReport simulate_decode(std::span<const std::int32_t> stream, LfuCache& cache,
                          const TierModel& tier, std::size_t stem_layers, std::size_t d_ff);

struct MemoryFootprint {
    double freed_fraction = 0.0;           // of baseline FFN matrix memory
    std::uint64_t resident_elements = 0;   // FFN matrices kept on the fast tier
    std::uint64_t offloaded_elements = 0;  // table entries on the host tier
    std::uint64_t cache_elements = 0;      // fast-tier cache allocation
    std::uint64_t resident_bytes = 0;
    std::uint64_t offloaded_bytes = 0;
    std::uint64_t cache_bytes = 0;
};

// How much FFN matrix memory leaves the fast tier when every table is
// offloaded. Layers that replace a projection (stem, stem_gate) free d*d_ff
// each out of the baseline 3*d*d_ff per layer.
MemoryFootprint table_memory_freed(const ModelConfig& config, std::size_t cache_capacity_rows = 0);

}  // namespace sim
}  // namespace stem
