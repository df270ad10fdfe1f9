#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "stem/training.hpp"

using namespace stem;

namespace {

ModelConfig tiny_config(std::vector<Variant> variants, std::size_t d = 32, std::size_t d_ff = 64,
                        std::size_t vocab = 64, std::size_t max_len = 64) {
    ModelConfig cfg;
    cfg.n_layers = variants.size();
    cfg.d_model = d;
    cfg.d_ff = d_ff;
    cfg.vocab = vocab;
    cfg.heads = 2;
    cfg.max_len = max_len;
    cfg.variants = std::move(variants);
    cfg.moe.experts = 2;
    cfg.moe.d_ff_expert = 16;
    return cfg;
}

std::vector<std::int32_t> markov_corpus(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    // Deterministic first-order chain: each token has a few preferred
    // successors, so the data is learnable but not trivial.
    Rng rng(seed);
    std::vector<std::int32_t> succ(vocab * 4);
    for (auto& s : succ) s = static_cast<std::int32_t>(rng.uniform_int(vocab));
    std::vector<std::int32_t> corpus(n);
    std::int32_t cur = 0;
    for (std::size_t i = 0; i < n; ++i) {
        corpus[i] = cur;
        cur = succ[static_cast<std::size_t>(cur) * 4 + rng.uniform_int(4)];
    }
    return corpus;
}

double mean_tail(const std::vector<double>& xs, std::size_t n) {
    const std::size_t start = xs.size() > n ? xs.size() - n : 0;
    double acc = 0.0;
    for (std::size_t i = start; i < xs.size(); ++i) acc += xs[i];
    return acc / static_cast<double>(xs.size() - start);
}

}  // namespace

TEST_CASE("learning rate schedule knots") {
    TrainConfig cfg;
    cfg.peak_lr = 2e-3;
    cfg.steps = 1000;
    cfg.warmup_ratio = 0.01;  // 10 warmup steps
    cfg.min_lr_factor = 0.1;

    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(10, cfg) == cfg.peak_lr);
    CHECK(lr_at(1000, cfg) == doctest::Approx(0.1 * cfg.peak_lr).epsilon(1e-12));

    // Continuity: adjacent deltas bounded by the warmup slope.
    double prev = lr_at(0, cfg);
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
        const double cur = lr_at(s, cfg);
        CHECK(std::abs(cur - prev) <= cfg.peak_lr / 10.0 + 1e-12);
        prev = cur;
    }

    TrainConfig lin = cfg;
    lin.schedule = TrainConfig::Schedule::linear;
    CHECK(lr_at(1000, lin) == doctest::Approx(0.1 * cfg.peak_lr).epsilon(1e-12));
    CHECK(lr_at(505, lin) ==
          doctest::Approx(cfg.peak_lr - (cfg.peak_lr - 0.1 * cfg.peak_lr) * 0.5).epsilon(1e-12));

    TrainConfig bad = cfg;
    bad.warmup_ratio = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adamw single updates match the hand recurrence") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;

    // Zero grads and zero decay leave parameters unchanged.
    Tensor p({2}, {1.5, -0.5});
    Tensor m({2}), v({2});
    std::vector<double> zero{0.0, 0.0};
    adamw_update(p, zero, m, v, 1, 1e-2, cfg);
    CHECK(p.values()[0] == 1.5);
    CHECK(p.values()[1] == -0.5);

    // One step from scratch on a scalar: -lr * mhat / (sqrt(vhat) + eps).
    Tensor s({1}, {2.0});
    Tensor sm({1}), sv({1});
    const double g = 0.3, lr = 1e-2;
    adamw_update(s, std::vector<double>{g}, sm, sv, 1, lr, cfg);
    const double mhat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
    const double vhat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
    const double expect = 2.0 - lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps));
    CHECK(s.values()[0] == doctest::Approx(expect).epsilon(1e-15));

    // Decay-only: parameter scales by (1 - lr * wd) per step.
    TrainConfig decay = cfg;
    decay.weight_decay = 0.1;
    Tensor q({1}, {4.0});
    Tensor qm({1}), qv({1});
    adamw_update(q, std::vector<double>{0.0}, qm, qv, 1, lr, decay);
    CHECK(q.values()[0] == doctest::Approx(4.0 * (1.0 - lr * 0.1)).epsilon(1e-15));
}

TEST_CASE("short training run reduces the loss deterministically") {
    auto corpus = markov_corpus(4000, 64, 7);
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.seq_len = 32;
    cfg.batch_size = 2;
    cfg.peak_lr = 3e-3;
    cfg.seed = 1;

    Model m = build_model(tiny_config({Variant::dense, Variant::stem}, 64, 128), 11);
    auto result = train(m, corpus, cfg);
    CHECK(result.completed);
    CHECK(result.trace.loss.size() == cfg.steps);
    for (double l : result.trace.loss) CHECK(std::isfinite(l));
    CHECK(mean_tail(result.trace.loss, 20) < result.trace.loss.front());

    // Identical seed and data give an identical trace.
    Model m2 = build_model(tiny_config({Variant::dense, Variant::stem}, 64, 128), 11);
    auto result2 = train(m2, corpus, cfg);
    CHECK(result.trace.loss == result2.trace.loss);
    CHECK(result.trace.lr == result2.trace.lr);

    // A dense twin on the same data also trains to completion.
    Model dense = build_model(tiny_config({Variant::dense, Variant::dense}, 64, 128), 11);
    auto result3 = train(dense, corpus, cfg);
    CHECK(result3.completed);
    for (double l : result3.trace.loss) CHECK(std::isfinite(l));
}

TEST_CASE("single-batch overfit memorizes the window") {
    Rng rng(3);
    std::vector<std::int32_t> sample(33);
    for (auto& t : sample) t = static_cast<std::int32_t>(rng.uniform_int(64));

    TrainConfig cfg;
    cfg.steps = 500;
    cfg.seq_len = 32;
    cfg.batch_size = 1;
    cfg.peak_lr = 3e-3;
    cfg.weight_decay = 0.0;

    Model m = build_model(tiny_config({Variant::dense, Variant::stem}), 5);
    auto result = train(m, sample, cfg);
    CHECK(result.completed);
    CHECK(result.trace.loss.back() < 0.1);
}

TEST_CASE("gradient flow into tables is token local") {
    auto cfg_model = tiny_config({Variant::dense, Variant::stem, Variant::stem});
    Model m = build_model(cfg_model, 9);
    Model before = m.clone();

    // Corpus of exactly one window makes the single batch deterministic.
    std::vector<std::int32_t> window{5, 9, 5, 9, 5, 9, 5, 9, 2};
    TrainConfig cfg;
    cfg.steps = 1;
    cfg.seq_len = 8;
    cfg.batch_size = 1;
    auto result = train(m, window, cfg);
    CHECK(result.completed);

    const double lr1 = lr_at(1, cfg);
    for (std::size_t li : {std::size_t{1}, std::size_t{2}}) {
        const Tensor& now = m.layers[li].table;
        const Tensor& was = before.layers[li].table;
        // Rows of tokens in the batch move by more than decay alone.
        for (std::int32_t t : {5, 9, 2}) {
            bool changed = false;
            for (std::size_t f = 0; f < now.dim(1); ++f) {
                const double decay_only =
                    was.at(static_cast<std::size_t>(t), f) * (1.0 - lr1 * cfg.weight_decay);
                if (now.at(static_cast<std::size_t>(t), f) != decay_only) changed = true;
            }
            CHECK(changed);
        }
        // Rows of absent tokens change only via decoupled decay.
        for (std::int32_t t : {0, 17, 63}) {
            for (std::size_t f = 0; f < now.dim(1); ++f) {
                const double w = was.at(static_cast<std::size_t>(t), f);
                CHECK(now.at(static_cast<std::size_t>(t), f) ==
                      doctest::Approx(w - lr1 * cfg.weight_decay * w).epsilon(1e-15));
            }
        }
    }
}

TEST_CASE("spike counting") {
    std::vector<double> flat(300, 2.0);
    CHECK(spike_count(flat) == 0);

    // One clearly injected spike over a noisy baseline.
    Rng rng(5);
    std::vector<double> noisy(400);
    for (double& x : noisy) x = 2.0 + 0.01 * rng.normal();
    noisy[250] = 2.0 + 10 * 0.01;
    CHECK(spike_count(noisy, 100, 4.0) == 1);

    // Brute-force recount oracle on a synthetic trace.
    std::vector<double> trace(500);
    for (double& x : trace) x = 1.0 + 0.05 * rng.normal();
    trace[120] += 1.0;
    trace[300] += 2.0;
    const std::size_t window = 50;
    const double k = 4.0;
    std::size_t expect = 0;
    for (std::size_t i = window; i < trace.size(); ++i) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t j = i - window; j < i; ++j) mean += trace[j];
        mean /= static_cast<double>(window);
        for (std::size_t j = i - window; j < i; ++j) sq += (trace[j] - mean) * (trace[j] - mean);
        const double sd = std::sqrt(sq / static_cast<double>(window));
        if (trace[i] > mean + k * sd) ++expect;
    }
    CHECK(expect >= 2);
    CHECK(spike_count(trace, window, k) == expect);

    CHECK_THROWS_AS(spike_count(flat, 1, 4.0), ConfigError);
}

TEST_CASE("optimizer state round trips through tensors") {
    AdamState state;
    state.t = 42;
    state.moments["w"].first = Tensor({2}, {0.5, -1.0});
    state.moments["w"].second = Tensor({2}, {0.25, 1.0});
    auto tensors = state.to_tensors();
    CHECK(tensors.size() == 2);
    AdamState back = AdamState::from_tensors(tensors, state.t);
    CHECK(back.t == 42);
    CHECK(back.moments.at("w").first.values()[1] == -1.0);
    CHECK(back.moments.at("w").second.values()[0] == 0.25);
}

TEST_CASE("train aborts cleanly on a divergent configuration") {
    auto corpus = markov_corpus(500, 64, 11);
    TrainConfig cfg;
    cfg.steps = 60;
    cfg.seq_len = 16;
    cfg.peak_lr = 2e8;  // guaranteed blow-up
    cfg.warmup_ratio = 0.02;
    Model m = build_model(tiny_config({Variant::dense, Variant::dense}), 13);
    TrainResult result;
    try {
        result = train(m, corpus, cfg);
    } catch (const NumericError&) {
        // Non-finite gradients may trip before the loss does; both are
        // acceptable abort paths.
        return;
    }
    CHECK_FALSE(result.completed);
    CHECK_FALSE(result.abort_reason.empty());
    CHECK(result.trace.loss.size() < cfg.steps);
}
