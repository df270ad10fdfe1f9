#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stem/tensor.hpp"
#include "stem/threading.hpp"

using namespace stem;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

// Independent triple-loop product, no shared code with ops::matmul.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a.at(i, kk) * b.at(kk, j);
            out[i * n + j] = acc;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
    Ctx ctx;
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor y = ops::matmul(ctx, eye, a);
    CHECK(y.values()[0] == 1.0);
    CHECK(y.values()[1] == 2.0);
    CHECK(y.values()[2] == 3.0);
    CHECK(y.values()[3] == 4.0);

    Tensor p({2, 2}, {1, 0, 0, 0});
    Tensor v({2, 1}, {5, 7});
    Tensor pv = ops::matmul(ctx, p, v);
    CHECK(pv.values()[0] == 5.0);
    CHECK(pv.values()[1] == 0.0);
}

TEST_CASE("matmul against triple-loop oracle") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Ctx ctx;
    Tensor y = ops::matmul(ctx, a, b);
    const auto expect = matmul_oracle(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(y.values()[i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch throws") {
    Ctx ctx;
    Tensor a({2, 3});
    Tensor b({2, 2});
    CHECK_THROWS_AS(ops::matmul(ctx, a, b), ShapeError);
}

TEST_CASE("silu closed-form values") {
    Ctx ctx;
    Tensor x({3}, {0.0, 1.0, -20.0});
    Tensor y = ops::silu(ctx, x);
    CHECK(y.values()[0] == 0.0);
    CHECK(y.values()[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    const double expect = -20.0 / (1.0 + std::exp(20.0));
    CHECK(y.values()[2] == doctest::Approx(expect).epsilon(1e-9));
    CHECK(std::abs(y.values()[2] + 4.12e-8) < 1e-9);
}

TEST_CASE("elementwise mul basics") {
    Ctx ctx;
    Tensor a({2}, {1, 2});
    CHECK(ops::mul(ctx, a, Tensor({2}, {0, 0})).values()[1] == 0.0);
    Tensor y = ops::mul(ctx, a, Tensor({2}, {3, 4}));
    CHECK(y.values()[0] == 3.0);
    CHECK(y.values()[1] == 8.0);
    CHECK_THROWS_AS(ops::mul(ctx, a, Tensor({3})), ShapeError);
}

TEST_CASE("gradient of sum(a*b) w.r.t. a equals b") {
    Rng rng(11);
    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({3, 5}, rng);
    auto f = [&](const Ctx& c) { return ops::sum(c, ops::mul(c, a, b)); };
    auto report = grad_check(f, {a}, 1e-5, 1e-6);
    CHECK(report.pass);
    // The analytic gradient itself must be exactly b.
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.grad()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("row broadcast add and mul") {
    Ctx ctx;
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row({3}, {10, 20, 30});
    Tensor s = ops::add(ctx, a, row);
    CHECK(s.at(1, 2) == 36.0);
    Tensor m = ops::mul(ctx, a, row);
    CHECK(m.at(0, 1) == 40.0);

    // Backward sums over rows into the broadcast operand.
    Tape tape;
    Ctx tctx{&tape, nullptr};
    Tensor loss = ops::sum(tctx, ops::mul(tctx, a, row));
    tape.backward(loss);
    CHECK(row.grad()[0] == doctest::Approx(1.0 + 4.0));
    CHECK(row.grad()[2] == doctest::Approx(3.0 + 6.0));
}

TEST_CASE("gather rows forward and duplicate-id backward") {
    Tensor table({2, 2}, {1, 2, 3, 4});
    std::vector<std::int32_t> ids{1};
    Ctx ctx;
    Tensor y = ops::gather_rows(ctx, table, ids);
    CHECK(y.values()[0] == 3.0);
    CHECK(y.values()[1] == 4.0);

    // ids=[0,0]: backward of sum accumulates [[2,2]] into row 0.
    Tape tape;
    Ctx tctx{&tape, nullptr};
    std::vector<std::int32_t> dup{0, 0};
    Tensor loss = ops::sum(tctx, ops::gather_rows(tctx, table, dup));
    tape.backward(loss);
    CHECK(table.grad()[0] == 2.0);
    CHECK(table.grad()[1] == 2.0);
    CHECK(table.grad()[2] == 0.0);

    std::vector<std::int32_t> bad{5};
    CHECK_THROWS_AS(ops::gather_rows(ctx, table, bad), IndexError);
}

TEST_CASE("gather backward equals dense one-hot matmul backward") {
    Rng rng(13);
    const std::size_t v = 6, d = 4;
    Tensor table = random_tensor({v, d}, rng);
    std::vector<std::int32_t> ids{3, 0, 3, 5};

    // Route A: gather.
    Tensor table_a = table.clone();
    Tape tape_a;
    Ctx ctx_a{&tape_a, nullptr};
    Tensor ga = ops::gather_rows(ctx_a, table_a, ids);
    Tensor wa = random_tensor({ids.size(), d}, rng);
    Tensor loss_a = ops::sum(ctx_a, ops::mul(ctx_a, ga, wa));
    tape_a.backward(loss_a);

    // Route B: one-hot selection matrix times table.
    Tensor table_b = table.clone();
    Tensor onehot({ids.size(), v});
    for (std::size_t i = 0; i < ids.size(); ++i) onehot.at(i, static_cast<std::size_t>(ids[i])) = 1.0;
    Tape tape_b;
    Ctx ctx_b{&tape_b, nullptr};
    Tensor gb = ops::matmul(ctx_b, onehot, table_b);
    Tensor loss_b = ops::sum(ctx_b, ops::mul(ctx_b, gb, wa));
    tape_b.backward(loss_b);

    for (std::size_t i = 0; i < table.size(); ++i) {
        CHECK(table_a.grad()[i] == doctest::Approx(table_b.grad()[i]).epsilon(1e-12));
    }
}

TEST_CASE("gather/scatter round trip vs naive copy oracle") {
    Rng rng(17);
    Tensor table = random_tensor({8, 3}, rng);
    std::vector<std::int32_t> ids{2, 2, 7, 0, 4};
    Ctx ctx;
    Tensor g = ops::gather_rows(ctx, table, ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(g.at(i, j) == table.at(static_cast<std::size_t>(ids[i]), j));
        }
    }
    Tensor back = ops::scatter_rows(ctx, g, ids, 8);
    // Row 2 was gathered twice, so it comes back doubled.
    CHECK(back.at(2, 1) == doctest::Approx(2.0 * table.at(2, 1)));
    CHECK(back.at(1, 0) == 0.0);
    CHECK(back.at(4, 2) == doctest::Approx(table.at(4, 2)));
}

TEST_CASE("softmax symmetry and stability") {
    Ctx ctx;
    Tensor x({1, 2}, {0, 0});
    Tensor y = ops::softmax_rows(ctx, x);
    CHECK(y.values()[0] == 0.5);
    CHECK(y.values()[1] == 0.5);

    // Large logits must not overflow thanks to max subtraction.
    Tensor big({1, 2}, {1000.0, 999.0});
    Tensor yb = ops::softmax_rows(ctx, big);
    CHECK(yb.all_finite());
    CHECK(yb.values()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    CHECK_THROWS_AS(ops::softmax_rows(ctx, Tensor({0, 0})), ShapeError);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
    Ctx ctx;
    const std::size_t v = 37;
    Tensor logits({2, v});
    std::vector<std::int32_t> targets{5, 11};
    Tensor loss = ops::cross_entropy(ctx, logits, targets);
    CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
}

TEST_CASE("rmsnorm has unit root-mean-square before scaling") {
    Rng rng(23);
    Tensor x = random_tensor({4, 16}, rng, 0.7);
    Tensor ones({16});
    for (double& v : ones.values()) v = 1.0;
    Ctx ctx;
    Tensor y = ops::rmsnorm(ctx, x, ones);
    for (std::size_t i = 0; i < 4; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < 16; ++j) ms += y.at(i, j) * y.at(i, j);
        ms /= 16.0;
        CHECK(std::abs(std::sqrt(ms) - 1.0) < 1e-10);
    }
}

TEST_CASE("grad_check quadratic") {
    Tensor x({2}, {1, 2});
    auto f = [&](const Ctx& c) { return ops::sum(c, ops::mul(c, x, x)); };
    auto report = grad_check(f, {x}, 1e-5, 1e-6);
    CHECK(report.pass);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-8));
}

TEST_CASE("every op passes grad_check on random shapes") {
    Rng rng(31);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor c = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({6, 4}, rng);
    Tensor s = random_tensor({3}, rng, 0.3);
    for (double& v : s.values()) v += 2.0;  // keep divisors away from zero
    Tensor gain = random_tensor({4}, rng, 0.2);
    std::vector<std::int32_t> ids{1, 0, 1};

    auto check = [&](const std::function<Tensor(const Ctx&)>& f, std::vector<Tensor> params) {
        auto report = grad_check(f, std::move(params), 1e-5, 1e-4);
        CHECK(report.pass);
        CHECK(report.max_rel_err < 1e-4);
    };

    check([&](const Ctx& t) { return ops::sum(t, ops::matmul(t, a, b)); }, {a, b});
    check([&](const Ctx& t) { return ops::sum(t, ops::linear(t, a, w)); }, {a, w});
    check([&](const Ctx& t) { return ops::sum(t, ops::silu(t, ops::matmul(t, a, b))); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::add(t, a, c), c)); }, {a, c});
    check([&](const Ctx& t) { return ops::sum(t, ops::scale(t, a, -1.7)); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::scale_rows(t, a, s)); }, {a, s});
    check([&](const Ctx& t) { return ops::sum(t, ops::div_rows(t, a, s)); }, {a, s});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::row_sum(t, a), s)); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::gather_rows(t, w, ids)); }, {w});
    check([&](const Ctx& t) { return ops::sum(t, ops::scatter_rows(t, a, ids, 7)); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::slice_cols(t, a, 1, 2)); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::concat_cols(t, {a, c}), ops::concat_cols(t, {c, a}))); }, {a, c});
    check([&](const Ctx& t) { return ops::sum(t, ops::matmul(t, ops::transpose(t, a), c)); }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::softmax_rows(t, a), c)); }, {a});
    check([&](const Ctx& t) {
        Tensor sq = ops::matmul(t, a, ops::transpose(t, a));
        return ops::sum(t, ops::mul(t, ops::causal_softmax(t, sq), sq));
    }, {a});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::rmsnorm(t, a, gain), c)); }, {a, gain});
    check([&](const Ctx& t) { return ops::sum(t, ops::mul(t, ops::rope(t, a, 2), c)); }, {a});
    std::vector<std::int32_t> targets{2, 0, 4};
    Tensor head = random_tensor({5, 4}, rng);
    check([&](const Ctx& t) { return ops::cross_entropy(t, ops::linear(t, a, head), targets); }, {a});
}

TEST_CASE("cross entropy grad check with its own logits as parameter") {
    Rng rng(41);
    Tensor logits = random_tensor({4, 6}, rng);
    std::vector<std::int32_t> targets{0, 5, 2, 2};
    auto f = [&](const Ctx& t) { return ops::cross_entropy(t, logits, targets); };
    CHECK(grad_check(f, {logits}, 1e-5, 1e-4).pass);
}

TEST_CASE("determinism across runs and thread counts") {
    auto run = [](int threads) {
        set_num_threads(threads);
        Rng rng(99);
        Tensor a = random_tensor({64, 48}, rng);
        Tensor b = random_tensor({48, 56}, rng);
        Tape tape;
        Ctx ctx{&tape, nullptr};
        Tensor y = ops::matmul(ctx, a, b);
        Tensor loss = ops::sum(ctx, ops::mul(ctx, y, y));
        tape.backward(loss);
        std::vector<double> out(y.values().begin(), y.values().end());
        out.insert(out.end(), a.grad().begin(), a.grad().end());
        out.push_back(loss.item());
        return out;
    };
    const auto base = run(1);
    CHECK(run(1) == base);   // identical run, bit identical
    CHECK(run(2) == base);   // row partitioning must not change results
    CHECK(run(5) == base);
    set_num_threads(0);      // clamps to 1
    CHECK(num_threads() == 1);
    set_num_threads(2);
}

TEST_CASE("tape replays each node exactly once") {
    Tensor x({2}, {3.0, -1.5});
    Tape tape;
    Ctx ctx{&tape, nullptr};
    Tensor y = ops::scale(ctx, x, 2.0);
    Tensor loss = ops::sum(ctx, y);
    const std::size_t nodes = tape.size();
    tape.backward(loss);
    CHECK(nodes == 2);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
    // A second replay would double the grads; callers clear instead.
    tape.clear();
    CHECK(tape.size() == 0);
}

TEST_CASE("non-finite detection") {
    Tensor x({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_FALSE(x.all_finite());
    Tensor ok({2}, {1.0, 2.0});
    CHECK(ok.all_finite());
}
