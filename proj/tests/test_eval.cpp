#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "stem/corpus.hpp"
#include "stem/cost_model.hpp"
#include "stem/eval.hpp"
#include "stem/training.hpp"

using namespace stem;
using namespace stem::eval;

namespace {

// Scans the context for the [marker, key, value] triple.
std::size_t count_needles(const NiahInstance& inst) {
    std::size_t found = 0;
    for (std::size_t i = 0; i + 2 < inst.context.size(); ++i) {
        if (inst.context[i] == corpus::kMarkerToken && inst.context[i + 1] == inst.key &&
            inst.context[i + 2] == inst.value) {
            ++found;
        }
    }
    return found;
}

}  // namespace

TEST_CASE("niah construction") {
    // Minimal context is needle + query.
    auto tiny = build_niah(6, 64, 1);
    CHECK(tiny.context.size() == 6);
    CHECK(count_needles(tiny) == 1);
    CHECK(tiny.context[4] == corpus::kMarkerToken);
    CHECK(tiny.context[5] == tiny.key);

    // Same seed, same instance.
    auto a = build_niah(64, 128, 7);
    auto b = build_niah(64, 128, 7);
    CHECK(a.context == b.context);
    CHECK(a.value == b.value);

    // Needle occurs exactly once, for many seeds.
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto inst = build_niah(48, 96, seed);
        CHECK(inst.context.size() == 48);
        CHECK(count_needles(inst) == 1);
    }
    CHECK_THROWS_AS(build_niah(4, 64, 0), ConfigError);
}

TEST_CASE("retrieval scoring self-test with a copying oracle") {
    std::vector<NiahInstance> instances;
    for (std::uint64_t s = 0; s < 20; ++s) instances.push_back(build_niah(32, 64, s));

    // Constructed override that always answers correctly: scan the prompt for
    // the needle and emit a one-hot.
    LogitsFn perfect = [](const std::vector<std::int32_t>& prompt) {
        std::vector<double> row(64, 0.0);
        for (std::size_t i = 0; i + 2 < prompt.size(); ++i) {
            if (prompt[i] == corpus::kMarkerToken && prompt[i + 1] == prompt[prompt.size() - 1]) {
                row[static_cast<std::size_t>(prompt[i + 2])] = 10.0;
            }
        }
        return row;
    };
    CHECK(score_retrieval(perfect, instances) == 1.0);
}

TEST_CASE("untrained model scores near chance") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.d_ff = 48;
    cfg.vocab = 256;
    cfg.heads = 2;
    cfg.max_len = 64;
    cfg.variants = {Variant::dense, Variant::stem};
    Model m = build_model(cfg, 3);

    std::vector<NiahInstance> instances;
    for (std::uint64_t s = 0; s < 100; ++s) instances.push_back(build_niah(48, cfg.vocab, s));
    const double acc = score_retrieval(model_logits(m), instances);
    CHECK(acc < 0.05);  // chance is ~1/253
}

TEST_CASE("activated parameters grow with context and new unique tokens") {
    const std::size_t d_ff = 48, layers = 2;
    std::uint64_t prev = 0;
    for (std::size_t len : {16u, 32u, 64u, 128u}) {
        auto inst = build_niah(len, 128, 11);
        const auto act = cost::activated_params(layers, d_ff, inst.context);
        CHECK(act >= prev);
        prev = act;
    }

    // Appending a brand-new token strictly increases the count.
    auto inst = build_niah(32, 128, 13);
    const auto before = cost::activated_params(layers, d_ff, inst.context);
    std::set<std::int32_t> seen(inst.context.begin(), inst.context.end());
    std::int32_t fresh = 3;
    while (seen.count(fresh) > 0) ++fresh;
    auto extended = inst.context;
    extended.push_back(fresh);
    CHECK(cost::activated_params(layers, d_ff, extended) == before + layers * d_ff);

    // Appending a repeat does not.
    auto repeated = inst.context;
    repeated.push_back(inst.context.front());
    CHECK(cost::activated_params(layers, d_ff, repeated) == before);
}

TEST_CASE("validation perplexity definitions") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.d_ff = 24;
    cfg.vocab = 32;
    cfg.heads = 2;
    cfg.max_len = 16;
    cfg.variants = {Variant::dense};
    Model m = build_model(cfg, 5);

    // Zeroing the head makes every row uniform: PPL == V exactly.
    for (double& v : m.lm_head.values()) v = 0.0;
    auto data = corpus::markov(200, cfg.vocab, 1);
    CHECK(val_ppl(m, data, 8) == doctest::Approx(static_cast<double>(cfg.vocab)).epsilon(1e-9));

    // Independent recomputation from raw logits.
    Model m2 = build_model(cfg, 6);
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + 9 <= data.size(); start += 8) {
        std::vector<std::int32_t> window(data.begin() + start, data.begin() + start + 8);
        Tensor logits = forward(m2, window);
        for (std::size_t i = 0; i < 8; ++i) {
            double mx = logits.at(i, 0);
            for (std::size_t j = 1; j < cfg.vocab; ++j) mx = std::max(mx, logits.at(i, j));
            double z = 0.0;
            for (std::size_t j = 0; j < cfg.vocab; ++j) z += std::exp(logits.at(i, j) - mx);
            nll += std::log(z) + mx - logits.at(i, static_cast<std::size_t>(data[start + i + 1]));
            ++count;
        }
    }
    const double expect = std::exp(nll / static_cast<double>(count));
    CHECK(val_ppl(m2, data, 8) == doctest::Approx(expect).epsilon(1e-9));

    CHECK_THROWS_AS(val_ppl(m, std::vector<std::int32_t>{1, 2}, 8), ConfigError);
}

TEST_CASE("memorized sequence drives perplexity toward one") {
    Rng rng(9);
    std::vector<std::int32_t> sample(33);
    for (auto& t : sample) t = 3 + static_cast<std::int32_t>(rng.uniform_int(29));

    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.d_ff = 64;
    cfg.vocab = 32;
    cfg.heads = 2;
    cfg.max_len = 32;
    cfg.variants = {Variant::dense, Variant::stem};
    Model m = build_model(cfg, 7);

    TrainConfig tc;
    tc.steps = 600;
    tc.seq_len = 32;
    tc.batch_size = 1;
    tc.peak_lr = 3e-3;
    tc.weight_decay = 0.0;
    auto result = train(m, sample, tc);
    REQUIRE(result.completed);
    CHECK(val_ppl(m, sample, 32) < 1.2);
}

TEST_CASE("a trained model retrieves needles well above chance") {
    const std::size_t vocab = 64, instance_len = 16;
    auto stream = corpus::niah_stream(20000, instance_len, vocab, 17, /*pairs=*/1);

    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    cfg.d_ff = 128;
    cfg.vocab = vocab;
    cfg.heads = 4;
    cfg.max_len = 512;
    cfg.variants = {Variant::dense, Variant::stem};
    Model m = build_model(cfg, 21);

    TrainConfig tc;
    tc.steps = 5000;
    tc.seq_len = instance_len;
    tc.batch_size = 8;
    tc.peak_lr = 1e-3;
    tc.warmup_ratio = 0.03;
    tc.seed = 2;
    auto result = train(m, stream, tc);
    REQUIRE(result.completed);

    std::vector<NiahInstance> instances;
    for (std::uint64_t s = 1000; s < 1100; ++s) {
        instances.push_back(build_niah(instance_len, vocab, s));
    }
    const double acc = score_retrieval(model_logits(m), instances);
    const double chance = 1.0 / static_cast<double>(vocab - corpus::kFirstContentToken);
    CHECK(acc > 5.0 * chance);
}
