#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stem/model.hpp"

namespace stem {
namespace analysis {

struct CosineHistogram {
    std::vector<double> bin_edges;        // bins + 1 edges over [-1, 1]
    std::vector<std::uint64_t> counts;
    std::uint64_t pair_count = 0;
    double mean = 0.0;
    double stddev = 0.0;
    double mean_abs = 0.0;
    std::size_t zero_rows_skipped = 0;
    std::string source;
};

// Cosine similarity over unit-normalized sampled distinct row pairs. Rows
// with zero norm are skipped (and counted). When the number of available
// pairs is at most sample_pairs, all pairs are enumerated instead of sampled.
CosineHistogram pairwise_cosine(const Tensor& rows, std::size_t sample_pairs, std::uint64_t seed,
                                std::size_t bins = 200, std::string source = "");

void write_histogram_csv(const std::string& path, const CosineHistogram& hist);

enum class AddressKind { up_output, stem_row, gated };

// The per-position d_ff-wide vectors feeding the down projection at `layer`:
// up_output = W_u x, stem_row = U[t], gated = the actual down-projection
// input of that layer's variant.
Tensor address_vectors(const Model& model, std::span<const std::int32_t> tokens,
                       std::size_t layer, AddressKind kind);

struct HeapsFit {
    double k = 0.0;
    double beta = 0.0;
    double residual = 0.0;  // rms residual in log space
};

// Least squares of log(uniq) on log(length) for the growth law
// uniq ~= k * length^beta.
HeapsFit heaps_fit(std::span<const double> lengths, std::span<const double> uniq_counts);

// Convenience: unique-token growth curve of a corpus prefix ladder.
HeapsFit heaps_fit_over_corpus(std::span<const std::int32_t> corpus,
                               std::span<const std::size_t> lengths);

}  // namespace analysis
}  // namespace stem
