#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stem/errors.hpp"
#include "stem/rng.hpp"

namespace stem {

// Dense 64-bit float tensor, row-major. A Tensor is a cheap handle to shared
// storage; ops create fresh outputs, so handles behave like values in
// practice. grad is allocated lazily the first time the tensor participates
// in a taped operation.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                        bool truncated = false);

    bool defined() const { return d_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape[i]; }
    std::size_t size() const { return d_->values.size(); }

    std::span<double> values() { return d_->values; }
    std::span<const double> values() const { return d_->values; }

    // 2-D accessors (row-major).
    double& at(std::size_t i, std::size_t j) { return d_->values[i * d_->shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return d_->values[i * d_->shape[1] + j]; }
    double& at(std::size_t i) { return d_->values[i]; }
    double at(std::size_t i) const { return d_->values[i]; }
    double item() const;

    bool has_grad() const { return defined() && !d_->grad.empty(); }
    void ensure_grad();
    void zero_grad();
    void drop_grad() { d_->grad.clear(); }
    std::span<double> grad() { return d_->grad; }
    std::span<const double> grad() const { return d_->grad; }

    // Deep copy of values (no grad buffer).
    Tensor clone() const;

    // True when two handles share the same storage.
    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    bool all_finite() const;

private:
    struct Data {
        std::vector<std::size_t> shape;
        std::vector<double> values;
        std::vector<double> grad;
    };
    std::shared_ptr<Data> d_;
};

// Ordered record of executed operations. Each node is a backward closure that
// reads output grads and accumulates into input grads. backward() replays the
// record exactly once, in reverse.
class Tape {
public:
    void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }

    // Seeds grad(loss) = 1 and replays the tape in reverse. loss must be a
    // taped scalar.
    void backward(Tensor& loss);
    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// Instrumented operation counter, in the same per-layer accounting the
// analytic cost model uses: matmuls count one unit per multiply-accumulate
// and elementwise products count one unit per output element; activations,
// copies/gathers, normalization, and softmax are not counted.
struct FlopCounter {
    enum class Category { attn, ffn, head, other };

    struct LayerCounts {
        std::uint64_t attn = 0;
        std::uint64_t ffn = 0;
    };

    std::vector<LayerCounts> per_layer;
    std::uint64_t head = 0;
    std::uint64_t other = 0;

    Category category = Category::other;
    int layer = -1;

    void begin_layer(int i) {
        layer = i;
        if (i >= 0 && per_layer.size() <= static_cast<std::size_t>(i)) {
            per_layer.resize(static_cast<std::size_t>(i) + 1);
        }
    }

    void add(std::uint64_t n) {
        switch (category) {
            case Category::attn: per_layer[static_cast<std::size_t>(layer)].attn += n; break;
            case Category::ffn: per_layer[static_cast<std::size_t>(layer)].ffn += n; break;
            case Category::head: head += n; break;
            case Category::other: other += n; break;
        }
    }

    std::uint64_t total() const {
        std::uint64_t t = head + other;
        for (const auto& l : per_layer) t += l.attn + l.ffn;
        return t;
    }
};

// Execution context threaded through every op: a tape for gradient recording
// (null = inference) and an optional instruction counter.
struct Ctx {
    Tape* tape = nullptr;
    FlopCounter* flops = nullptr;

    void count(std::uint64_t n) const {
        if (flops != nullptr) flops->add(n);
    }
};

namespace ops {

// y = a[m×k] · b[k×n]. Backward: a.grad += g·bᵀ, b.grad += aᵀ·g.
Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b);

// y = x[n×in] · Wᵀ where W is [out×in] (rows of W are output-unit weights).
Tensor linear(const Ctx& ctx, const Tensor& x, const Tensor& w);

// Elementwise. b may have the same shape as a or be a row vector of length
// a.cols broadcast over rows; no other broadcast is supported.
Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor mul(const Ctx& ctx, const Tensor& a, const Tensor& b);

Tensor scale(const Ctx& ctx, const Tensor& x, double c);
Tensor silu(const Ctx& ctx, const Tensor& x);

// Per-row scaling/division by a length-n vector over an [n×d] matrix.
Tensor scale_rows(const Ctx& ctx, const Tensor& x, const Tensor& s);
Tensor div_rows(const Ctx& ctx, const Tensor& x, const Tensor& s);
Tensor row_sum(const Ctx& ctx, const Tensor& x);

// Full reduction to a scalar.
Tensor sum(const Ctx& ctx, const Tensor& x);

// Row i of the output is table[ids[i]]. Backward scatter-adds into
// table.grad; repeated ids accumulate.
Tensor gather_rows(const Ctx& ctx, const Tensor& table, std::span<const std::int32_t> ids);

// Inverse of gather: out[ids[i]] += x[i], all other rows zero.
Tensor scatter_rows(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> ids,
                    std::size_t rows);

Tensor slice_cols(const Ctx& ctx, const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const Ctx& ctx, const std::vector<Tensor>& parts);
Tensor transpose(const Ctx& ctx, const Tensor& x);

// Row-wise softmax, stabilized by row-max subtraction.
Tensor softmax_rows(const Ctx& ctx, const Tensor& x);

// Softmax over j <= i per row i of a square [L×L] score matrix; entries
// above the diagonal are exactly zero.
Tensor causal_softmax(const Ctx& ctx, const Tensor& scores);

// RMS normalization with learned per-column gain.
Tensor rmsnorm(const Ctx& ctx, const Tensor& x, const Tensor& gain, double eps = 1e-12);

// Rotary position embedding over [L×d] with the given head width; positions
// are row indices offset by pos0.
Tensor rope(const Ctx& ctx, const Tensor& x, std::size_t head_dim, std::size_t pos0 = 0,
            double base = 10000.0);

// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Ctx& ctx, const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace ops

// Finite-difference gradient verification.
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    bool pass = false;
};

// Runs f on a fresh tape, backpropagates, and compares each parameter's tape
// gradient against central differences. When a parameter has more than
// max_coords entries, a deterministic random subset is probed.
GradCheckReport grad_check(const std::function<Tensor(const Ctx&)>& f,
                           std::vector<Tensor> params, double eps = 1e-5, double tol = 1e-4,
                           std::size_t max_coords = 64, std::uint64_t seed = 0);

}  // namespace stem
