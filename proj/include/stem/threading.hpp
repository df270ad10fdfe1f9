#pragma once

#include <cstddef>
#include <functional>

namespace stem {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency (capped at 8), overridable via the STEM_THREADS environment
// variable or at runtime. Results are bit-identical for any thread count:
// work is partitioned over disjoint output rows and each row's arithmetic is
// independent of the partitioning.
int num_threads();
void set_num_threads(int n);

// Runs fn(begin, end) over chunks covering [0, n). Chunks may execute
// concurrently; fn must write only to state owned by its index range.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace stem
