#include "stem/eval.hpp"

#include <algorithm>
#include <cmath>

#include "stem/corpus.hpp"
#include "stem/memory_sim.hpp"

namespace stem {
namespace eval {

NiahInstance build_niah(std::size_t context_len, std::size_t vocab, std::uint64_t seed) {
    if (context_len < 6) throw ConfigError("niah context needs at least 6 tokens");
    if (vocab <= static_cast<std::size_t>(corpus::kFirstContentToken) + 2) {
        throw ConfigError("niah needs vocabulary beyond the reserved ids");
    }
    const std::int32_t lo = corpus::kFirstContentToken;
    const std::size_t content = vocab - static_cast<std::size_t>(lo);
    Rng rng(seed);

    NiahInstance inst;
    inst.key = lo + static_cast<std::int32_t>(rng.uniform_int(content));
    inst.value = lo + static_cast<std::int32_t>(rng.uniform_int(content));

    // filler | marker key value | filler | marker key
    const std::size_t filler_len = context_len - 5;
    std::vector<std::int32_t> filler(filler_len);
    {
        auto zipf = sim::zipf_stream(content, 1.0, filler_len, rng.next_u64());
        for (std::size_t i = 0; i < filler_len; ++i) filler[i] = lo + zipf[i];
    }
    inst.needle_pos = rng.uniform_int(filler_len + 1);
    inst.context.reserve(context_len);
    inst.context.insert(inst.context.end(), filler.begin(),
                        filler.begin() + static_cast<std::ptrdiff_t>(inst.needle_pos));
    inst.context.push_back(corpus::kMarkerToken);
    inst.context.push_back(inst.key);
    inst.context.push_back(inst.value);
    inst.context.insert(inst.context.end(),
                        filler.begin() + static_cast<std::ptrdiff_t>(inst.needle_pos),
                        filler.end());
    inst.context.push_back(corpus::kMarkerToken);
    inst.context.push_back(inst.key);
    return inst;
}

LogitsFn model_logits(const Model& model) {
    return [&model](const std::vector<std::int32_t>& tokens) {
        Tensor logits = forward(model, tokens);
        const std::size_t last = logits.dim(0) - 1;
        std::vector<double> row(logits.dim(1));
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = logits.at(last, j);
        return row;
    };
}

double score_retrieval(const LogitsFn& logits, const std::vector<NiahInstance>& instances) {
    if (instances.empty()) return 0.0;
    std::size_t correct = 0;
    for (const NiahInstance& inst : instances) {
        const std::vector<double> row = logits(inst.context);
        const std::size_t argmax =
            static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (static_cast<std::int32_t>(argmax) == inst.value) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

double val_ppl(const Model& model, std::span<const std::int32_t> corpus, std::size_t seq_len) {
    if (corpus.size() < seq_len + 1) throw ConfigError("validation corpus shorter than one window");
    double nll_sum = 0.0;
    std::size_t token_count = 0;
    Ctx ctx;
    for (std::size_t start = 0; start + seq_len + 1 <= corpus.size(); start += seq_len) {
        std::span<const std::int32_t> window = corpus.subspan(start, seq_len);
        std::span<const std::int32_t> targets = corpus.subspan(start + 1, seq_len);
        Tensor logits = forward(model, window);
        Tensor loss = ops::cross_entropy(ctx, logits, targets);
        nll_sum += loss.item() * static_cast<double>(seq_len);
        token_count += seq_len;
    }
    return std::exp(nll_sum / static_cast<double>(token_count));
}

}  // namespace eval
}  // namespace stem
