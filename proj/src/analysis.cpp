#include "stem/analysis.hpp"

#include <cmath>
#include <fstream>
#include <unordered_set>

namespace stem {
namespace analysis {

CosineHistogram pairwise_cosine(const Tensor& rows, std::size_t sample_pairs, std::uint64_t seed,
                                std::size_t bins, std::string source) {
    if (rows.rank() != 2 || rows.dim(0) < 2) {
        throw ShapeError("pairwise_cosine needs at least two rows");
    }
    const std::size_t n = rows.dim(0), d = rows.dim(1);

    CosineHistogram hist;
    hist.source = std::move(source);
    hist.bin_edges.resize(bins + 1);
    hist.counts.assign(bins, 0);
    for (std::size_t b = 0; b <= bins; ++b) {
        hist.bin_edges[b] = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins);
    }

    // Unit-normalize usable rows once.
    std::vector<std::size_t> usable;
    std::vector<double> unit(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += rows.at(i, j) * rows.at(i, j);
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            ++hist.zero_rows_skipped;
            continue;
        }
        for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = rows.at(i, j) / norm;
        usable.push_back(i);
    }
    if (usable.size() < 2) throw NumericError("pairwise_cosine: not enough nonzero rows");

    double sum = 0.0, sum_sq = 0.0, sum_abs = 0.0;
    auto record = [&](std::size_t a, std::size_t b) {
        double c = 0.0;
        for (std::size_t j = 0; j < d; ++j) c += unit[a * d + j] * unit[b * d + j];
        c = std::min(1.0, std::max(-1.0, c));
        std::size_t bin = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(bins));
        if (bin >= bins) bin = bins - 1;
        ++hist.counts[bin];
        ++hist.pair_count;
        sum += c;
        sum_sq += c * c;
        sum_abs += std::abs(c);
    };

    const std::size_t m = usable.size();
    const std::size_t all_pairs = m * (m - 1) / 2;
    if (all_pairs <= sample_pairs) {
        for (std::size_t a = 0; a < m; ++a) {
            for (std::size_t b = a + 1; b < m; ++b) record(usable[a], usable[b]);
        }
    } else {
        Rng rng(seed);
        for (std::size_t p = 0; p < sample_pairs; ++p) {
            const std::size_t a = rng.uniform_int(m);
            std::size_t b = rng.uniform_int(m - 1);
            if (b >= a) ++b;
            record(usable[a], usable[b]);
        }
    }

    const double count = static_cast<double>(hist.pair_count);
    hist.mean = sum / count;
    hist.mean_abs = sum_abs / count;
    const double var = sum_sq / count - hist.mean * hist.mean;
    hist.stddev = var > 0 ? std::sqrt(var) : 0.0;
    return hist;
}

void write_histogram_csv(const std::string& path, const CosineHistogram& hist) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "bin_left,bin_right,count\n";
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
        out << hist.bin_edges[b] << ',' << hist.bin_edges[b + 1] << ',' << hist.counts[b] << '\n';
    }
}

Tensor address_vectors(const Model& model, std::span<const std::int32_t> tokens,
                       std::size_t layer, AddressKind kind) {
    if (layer >= model.layers.size()) throw IndexError("address_vectors: layer out of range");
    const LayerParams& lp = model.layers[layer];
    const bool has_table = lp.table.defined();
    const bool has_up = lp.ffn.w_up.defined();

    if (kind == AddressKind::stem_row && !has_table) {
        throw ConfigError("address_vectors: layer has no token table");
    }
    if (kind == AddressKind::up_output && !has_up) {
        throw ConfigError("address_vectors: layer has no up projection");
    }

    Ctx ctx;
    if (kind == AddressKind::stem_row) {
        // Token-indexed addresses need no forward pass.
        return ops::gather_rows(ctx, lp.table, tokens);
    }

    Tensor h;
    ForwardOptions opt;
    opt.capture_ffn_input = &h;
    opt.capture_layer = layer;
    forward(model, tokens, opt);

    if (kind == AddressKind::up_output) {
        return ops::linear(ctx, h, lp.ffn.w_up);
    }

    // gated: the exact down-projection input for this layer's variant.
    switch (lp.variant) {
        case Variant::dense:
            return ops::mul(ctx, ops::silu(ctx, ops::linear(ctx, h, lp.ffn.w_gate)),
                            ops::linear(ctx, h, lp.ffn.w_up));
        case Variant::stem:
            return ops::mul(ctx, ops::silu(ctx, ops::linear(ctx, h, lp.ffn.w_gate)),
                            ops::gather_rows(ctx, lp.table, tokens));
        case Variant::stem_gate:
            return ops::mul(ctx, ops::silu(ctx, ops::gather_rows(ctx, lp.table, tokens)),
                            ops::linear(ctx, h, lp.ffn.w_up));
        case Variant::stem_dagger:
            return ops::mul(ctx, ops::silu(ctx, ops::linear(ctx, h, lp.ffn.w_gate)),
                            ops::add(ctx, ops::linear(ctx, h, lp.ffn.w_up),
                                     ops::gather_rows(ctx, lp.table, tokens)));
        default:
            throw ConfigError("address_vectors: layer variant has no single address stream");
    }
}

HeapsFit heaps_fit(std::span<const double> lengths, std::span<const double> uniq_counts) {
    if (lengths.size() != uniq_counts.size() || lengths.size() < 3) {
        throw ShapeError("heaps_fit needs at least three matching points");
    }
    const std::size_t n = lengths.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (lengths[i] <= 0 || uniq_counts[i] <= 0) {
            throw NumericError("heaps_fit needs positive samples");
        }
        const double x = std::log(lengths[i]);
        const double y = std::log(uniq_counts[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double nd = static_cast<double>(n);
    const double denom = nd * sxx - sx * sx;
    if (std::abs(denom) < 1e-12) throw NumericError("heaps_fit: degenerate (constant) lengths");
    HeapsFit fit;
    fit.beta = (nd * sxy - sx * sy) / denom;
    const double intercept = (sy - fit.beta * sx) / nd;
    fit.k = std::exp(intercept);
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pred = intercept + fit.beta * std::log(lengths[i]);
        const double err = std::log(uniq_counts[i]) - pred;
        rss += err * err;
    }
    fit.residual = std::sqrt(rss / nd);
    return fit;
}

HeapsFit heaps_fit_over_corpus(std::span<const std::int32_t> corpus,
                               std::span<const std::size_t> lengths) {
    std::vector<double> xs, ys;
    for (std::size_t len : lengths) {
        if (len > corpus.size()) len = corpus.size();
        std::unordered_set<std::int32_t> uniq(corpus.begin(),
                                              corpus.begin() + static_cast<std::ptrdiff_t>(len));
        xs.push_back(static_cast<double>(len));
        ys.push_back(static_cast<double>(uniq.size()));
    }
    return heaps_fit(xs, ys);
}

}  // namespace analysis
}  // namespace stem
