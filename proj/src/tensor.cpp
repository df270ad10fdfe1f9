#include "stem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stem/threading.hpp"

namespace stem {
namespace {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Work below this many inner operations is not worth fanning out.
constexpr std::size_t kParallelGrain = 1 << 15;

// Eight explicit accumulator lanes so the compiler can vectorize the dot
// product without reassociating anything beyond what is written here. The
// summation order is fixed, so results are reproducible bit-for-bit.
inline double dot(const double* __restrict a, const double* __restrict b, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        s4 += a[j + 4] * b[j + 4];
        s5 += a[j + 5] * b[j + 5];
        s6 += a[j + 6] * b[j + 6];
        s7 += a[j + 7] * b[j + 7];
    }
    double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; j < n; ++j) s += a[j] * b[j];
    return s;
}

inline void axpy(double* __restrict dst, double c, const double* __restrict src, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) dst[j] += c * src[j];
}

// Four accumulations fused into one pass over dst to cut memory traffic in
// rank-1-update loops. The grouping below is part of the defined summation
// order.
inline void axpy4(double* __restrict dst, double c0, const double* __restrict s0, double c1,
                  const double* __restrict s1, double c2, const double* __restrict s2, double c3,
                  const double* __restrict s3, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        dst[j] += (c0 * s0[j] + c1 * s1[j]) + (c2 * s2[j] + c3 * s3[j]);
    }
}

void maybe_parallel_rows(std::size_t rows, std::size_t work_per_row,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    if (rows * work_per_row >= kParallelGrain && rows >= 2) {
        parallel_for(rows, fn);
    } else {
        fn(0, rows);
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) {
    d_ = std::make_shared<Data>();
    d_->values.assign(shape_size(shape), 0.0);
    d_->shape = std::move(shape);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor " + shape_str(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
    }
    d_ = std::make_shared<Data>();
    d_->shape = std::move(shape);
    d_->values = std::move(values);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev, bool truncated) {
    Tensor t(std::move(shape));
    for (double& v : t.d_->values) {
        v = truncated ? rng.truncated_normal(0.0, stddev) : rng.normal(0.0, stddev);
    }
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(d_->shape));
    return d_->values[0];
}

void Tensor::ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : d_->values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tape::backward(Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");
    if (!loss.has_grad()) throw NumericError("backward on a tensor that is not on the tape");
    loss.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

namespace ops {
namespace {

void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " must be rank-2, got " +
                                        std::to_string(t.rank()));
}

void prep(const Ctx& ctx, std::initializer_list<Tensor> tensors) {
    if (ctx.tape == nullptr) return;
    for (Tensor t : tensors) t.ensure_grad();
}

}  // namespace

Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul lhs");
    require_rank2(b, "matmul rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner dims disagree: " + std::to_string(k) + " vs " +
                         std::to_string(b.dim(0)));
    }
    Tensor y({m, n});
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* yv = y.values().data();
    maybe_parallel_rows(m, n * k, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t i = r0; i < r1; ++i) {
            double* yrow = yv + i * n;
            const double* arow = av + i * k;
            std::size_t kk = 0;
            for (; kk + 4 <= k; kk += 4) {
                axpy4(yrow, arow[kk], bv + kk * n, arow[kk + 1], bv + (kk + 1) * n, arow[kk + 2],
                      bv + (kk + 2) * n, arow[kk + 3], bv + (kk + 3) * n, n);
            }
            for (; kk < k; ++kk) axpy(yrow, arow[kk], bv + kk * n, n);
        }
    });
    ctx.count(static_cast<std::uint64_t>(m) * n * k);
    if (ctx.tape) {
        prep(ctx, {a, b, y});
        Tensor ac = a, bc = b, yc = y;
        ctx.tape->record([ac, bc, yc, m, n, k]() mutable {
            const double* g = yc.grad().data();
            const double* av = ac.values().data();
            const double* bv = bc.values().data();
            double* ag = ac.grad().data();
            double* bg = bc.grad().data();
            // a.grad += g · bᵀ
            maybe_parallel_rows(m, n * k, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t i = r0; i < r1; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        ag[i * k + kk] += dot(g + i * n, bv + kk * n, n);
                    }
                }
            });
            // b.grad += aᵀ · g
            maybe_parallel_rows(k, m * n, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t kk = r0; kk < r1; ++kk) {
                    double* bgrow = bg + kk * n;
                    std::size_t i = 0;
                    for (; i + 4 <= m; i += 4) {
                        axpy4(bgrow, av[i * k + kk], g + i * n, av[(i + 1) * k + kk],
                              g + (i + 1) * n, av[(i + 2) * k + kk], g + (i + 2) * n,
                              av[(i + 3) * k + kk], g + (i + 3) * n, n);
                    }
                    for (; i < m; ++i) axpy(bgrow, av[i * k + kk], g + i * n, n);
                }
            });
        });
    }
    return y;
}

Tensor linear(const Ctx& ctx, const Tensor& x, const Tensor& w) {
    require_rank2(x, "linear input");
    require_rank2(w, "linear weight");
    const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) {
        throw ShapeError("linear: input width " + std::to_string(in) + " vs weight width " +
                         std::to_string(w.dim(1)));
    }
    Tensor y({n, out});
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    double* yv = y.values().data();
    maybe_parallel_rows(n, out * in, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t i = r0; i < r1; ++i) {
            const double* xrow = xv + i * in;
            double* yrow = yv + i * out;
            for (std::size_t o = 0; o < out; ++o) {
                yrow[o] = dot(xrow, wv + o * in, in);
            }
        }
    });
    ctx.count(static_cast<std::uint64_t>(n) * out * in);
    if (ctx.tape) {
        prep(ctx, {x, w, y});
        Tensor xc = x, wc = w, yc = y;
        ctx.tape->record([xc, wc, yc, n, in, out]() mutable {
            const double* g = yc.grad().data();
            const double* xv = xc.values().data();
            const double* wv = wc.values().data();
            double* xg = xc.grad().data();
            double* wg = wc.grad().data();
            // x.grad += g · W
            maybe_parallel_rows(n, out * in, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t i = r0; i < r1; ++i) {
                    double* xgrow = xg + i * in;
                    const double* grow = g + i * out;
                    std::size_t o = 0;
                    for (; o + 4 <= out; o += 4) {
                        axpy4(xgrow, grow[o], wv + o * in, grow[o + 1], wv + (o + 1) * in,
                              grow[o + 2], wv + (o + 2) * in, grow[o + 3], wv + (o + 3) * in, in);
                    }
                    for (; o < out; ++o) axpy(xgrow, grow[o], wv + o * in, in);
                }
            });
            // W.grad += gᵀ · x
            maybe_parallel_rows(out, n * in, [&](std::size_t r0, std::size_t r1) {
                for (std::size_t o = r0; o < r1; ++o) {
                    double* wgrow = wg + o * in;
                    std::size_t i = 0;
                    for (; i + 4 <= n; i += 4) {
                        axpy4(wgrow, g[i * out + o], xv + i * in, g[(i + 1) * out + o],
                              xv + (i + 1) * in, g[(i + 2) * out + o], xv + (i + 2) * in,
                              g[(i + 3) * out + o], xv + (i + 3) * in, in);
                    }
                    for (; i < n; ++i) axpy(wgrow, g[i * out + o], xv + i * in, in);
                }
            });
        });
    }
    return y;
}

namespace {

enum class Broadcast { exact, row };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::exact;
    if (a.rank() == 2 && ((b.rank() == 1 && b.dim(0) == a.dim(1)) ||
                          (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.dim(1)))) {
        return Broadcast::row;
    }
    throw ShapeError("incompatible elementwise shapes");
}

}  // namespace

Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b) {
    const Broadcast mode = broadcast_mode(a, b);
    Tensor y(a.shape());
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* yv = y.values().data();
    const std::size_t n = a.size();
    if (mode == Broadcast::exact) {
        for (std::size_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];
    } else {
        const std::size_t cols = a.dim(1);
        for (std::size_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i % cols];
    }
    if (ctx.tape) {
        prep(ctx, {a, b, y});
        Tensor ac = a, bc = b, yc = y;
        ctx.tape->record([ac, bc, yc, mode, n]() mutable {
            const double* g = yc.grad().data();
            double* ag = ac.grad().data();
            double* bg = bc.grad().data();
            for (std::size_t i = 0; i < n; ++i) ag[i] += g[i];
            if (mode == Broadcast::exact) {
                for (std::size_t i = 0; i < n; ++i) bg[i] += g[i];
            } else {
                const std::size_t cols = ac.dim(1);
                for (std::size_t i = 0; i < n; ++i) bg[i % cols] += g[i];
            }
        });
    }
    return y;
}

Tensor mul(const Ctx& ctx, const Tensor& a, const Tensor& b) {
    const Broadcast mode = broadcast_mode(a, b);
    Tensor y(a.shape());
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* yv = y.values().data();
    const std::size_t n = a.size();
    if (mode == Broadcast::exact) {
        for (std::size_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i];
    } else {
        const std::size_t cols = a.dim(1);
        for (std::size_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i % cols];
    }
    ctx.count(n);
    if (ctx.tape) {
        prep(ctx, {a, b, y});
        Tensor ac = a, bc = b, yc = y;
        ctx.tape->record([ac, bc, yc, mode, n]() mutable {
            const double* g = yc.grad().data();
            const double* av = ac.values().data();
            const double* bv = bc.values().data();
            double* ag = ac.grad().data();
            double* bg = bc.grad().data();
            if (mode == Broadcast::exact) {
                for (std::size_t i = 0; i < n; ++i) {
                    ag[i] += g[i] * bv[i];
                    bg[i] += g[i] * av[i];
                }
            } else {
                const std::size_t cols = ac.dim(1);
                for (std::size_t i = 0; i < n; ++i) {
                    ag[i] += g[i] * bv[i % cols];
                    bg[i % cols] += g[i] * av[i];
                }
            }
        });
    }
    return y;
}

Tensor scale(const Ctx& ctx, const Tensor& x, double c) {
    Tensor y(x.shape());
    const double* xv = x.values().data();
    double* yv = y.values().data();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) yv[i] = xv[i] * c;
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, c, n]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) xg[i] += g[i] * c;
        });
    }
    return y;
}

Tensor silu(const Ctx& ctx, const Tensor& x) {
    Tensor y(x.shape());
    const double* xv = x.values().data();
    double* yv = y.values().data();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) yv[i] = xv[i] * sigmoid(xv[i]);
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, n]() mutable {
            const double* g = yc.grad().data();
            const double* xv = xc.values().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const double s = sigmoid(xv[i]);
                xg[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
            }
        });
    }
    return y;
}

Tensor scale_rows(const Ctx& ctx, const Tensor& x, const Tensor& s) {
    require_rank2(x, "scale_rows input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (s.size() != n) throw ShapeError("scale_rows: scale length must equal row count");
    Tensor y({n, d});
    const double* xv = x.values().data();
    const double* sv = s.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) yv[i * d + j] = xv[i * d + j] * sv[i];
    }
    if (ctx.tape) {
        prep(ctx, {x, s, y});
        Tensor xc = x, sc = s, yc = y;
        ctx.tape->record([xc, sc, yc, n, d]() mutable {
            const double* g = yc.grad().data();
            const double* xv = xc.values().data();
            const double* sv = sc.values().data();
            double* xg = xc.grad().data();
            double* sg = sc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    xg[i * d + j] += g[i * d + j] * sv[i];
                    acc += g[i * d + j] * xv[i * d + j];
                }
                sg[i] += acc;
            }
        });
    }
    return y;
}

Tensor div_rows(const Ctx& ctx, const Tensor& x, const Tensor& s) {
    require_rank2(x, "div_rows input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (s.size() != n) throw ShapeError("div_rows: divisor length must equal row count");
    Tensor y({n, d});
    const double* xv = x.values().data();
    const double* sv = s.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) yv[i * d + j] = xv[i * d + j] / sv[i];
    }
    if (ctx.tape) {
        prep(ctx, {x, s, y});
        Tensor xc = x, sc = s, yc = y;
        ctx.tape->record([xc, sc, yc, n, d]() mutable {
            const double* g = yc.grad().data();
            const double* xv = xc.values().data();
            const double* sv = sc.values().data();
            double* xg = xc.grad().data();
            double* sg = sc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    xg[i * d + j] += g[i * d + j] / sv[i];
                    acc += g[i * d + j] * xv[i * d + j];
                }
                sg[i] -= acc / (sv[i] * sv[i]);
            }
        });
    }
    return y;
}

Tensor row_sum(const Ctx& ctx, const Tensor& x) {
    require_rank2(x, "row_sum input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor y({n});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += xv[i * d + j];
        yv[i] = acc;
    }
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, n, d]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) xg[i * d + j] += g[i];
            }
        });
    }
    return y;
}

Tensor sum(const Ctx& ctx, const Tensor& x) {
    if (x.size() == 0) throw ShapeError("sum over empty tensor");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor y = Tensor::scalar(acc);
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc]() mutable {
            const double g = yc.grad()[0];
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < xc.size(); ++i) xg[i] += g;
        });
    }
    return y;
}

Tensor gather_rows(const Ctx& ctx, const Tensor& table, std::span<const std::int32_t> ids) {
    require_rank2(table, "gather table");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("gather id " + std::to_string(id) + " outside table of " +
                             std::to_string(v) + " rows");
        }
    }
    Tensor y({ids.size(), d});
    const double* tv = table.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = tv + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, yv + i * d);
    }
    if (ctx.tape) {
        prep(ctx, {table, y});
        Tensor tc = table, yc = y;
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        ctx.tape->record([tc, yc, idv, d]() mutable {
            const double* g = yc.grad().data();
            double* tg = tc.grad().data();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                double* dst = tg + static_cast<std::size_t>(idv[i]) * d;
                const double* src = g + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor scatter_rows(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> ids,
                    std::size_t rows) {
    require_rank2(x, "scatter input");
    if (ids.size() != x.dim(0)) throw ShapeError("scatter: one id per input row required");
    const std::size_t d = x.dim(1);
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw IndexError("scatter id " + std::to_string(id) + " outside " +
                             std::to_string(rows) + " rows");
        }
    }
    Tensor y({rows, d});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        double* dst = yv + static_cast<std::size_t>(ids[i]) * d;
        const double* src = xv + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        ctx.tape->record([xc, yc, idv, d]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                const double* src = g + static_cast<std::size_t>(idv[i]) * d;
                for (std::size_t j = 0; j < d; ++j) xg[i * d + j] += src[j];
            }
        });
    }
    return y;
}

Tensor slice_cols(const Ctx& ctx, const Tensor& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_cols input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (start + count > d) throw ShapeError("slice_cols beyond column count");
    Tensor y({n, count});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(xv + i * d + start, xv + i * d + start + count, yv + i * count);
    }
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, start, count, n, d]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < count; ++j) xg[i * d + start + j] += g[i * count + j];
            }
        });
    }
    return y;
}

Tensor concat_cols(const Ctx& ctx, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const std::size_t n = parts[0].dim(0);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols part");
        if (p.dim(0) != n) throw ShapeError("concat_cols: row counts differ");
        total += p.dim(1);
    }
    Tensor y({n, total});
    double* yv = y.values().data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t d = p.dim(1);
        const double* pv = p.values().data();
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(pv + i * d, pv + (i + 1) * d, yv + i * total + off);
        }
        off += d;
    }
    if (ctx.tape) {
        prep(ctx, {y});
        for (const Tensor& p : parts) {
            Tensor pc = p;
            pc.ensure_grad();
        }
        Tensor yc = y;
        std::vector<Tensor> pc(parts.begin(), parts.end());
        ctx.tape->record([pc, yc, n, total]() mutable {
            const double* g = yc.grad().data();
            std::size_t off = 0;
            for (Tensor& p : pc) {
                const std::size_t d = p.dim(1);
                double* pg = p.grad().data();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < d; ++j) pg[i * d + j] += g[i * total + off + j];
                }
                off += d;
            }
        });
    }
    return y;
}

Tensor transpose(const Ctx& ctx, const Tensor& x) {
    require_rank2(x, "transpose input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor y({d, n});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) yv[j * n + i] = xv[i * d + j];
    }
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, n, d]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) xg[i * d + j] += g[j * n + i];
            }
        });
    }
    return y;
}

Tensor softmax_rows(const Ctx& ctx, const Tensor& x) {
    require_rank2(x, "softmax input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (d == 0) throw ShapeError("softmax over empty rows");
    Tensor y({n, d});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv + i * d;
        double m = row[0];
        for (std::size_t j = 1; j < d; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            yv[i * d + j] = std::exp(row[j] - m);
            z += yv[i * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) yv[i * d + j] /= z;
    }
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, n, d]() mutable {
            const double* g = yc.grad().data();
            const double* yv = yc.values().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * yv[i * d + j];
                for (std::size_t j = 0; j < d; ++j) {
                    xg[i * d + j] += yv[i * d + j] * (g[i * d + j] - dot);
                }
            }
        });
    }
    return y;
}

Tensor causal_softmax(const Ctx& ctx, const Tensor& scores) {
    require_rank2(scores, "causal_softmax input");
    const std::size_t L = scores.dim(0);
    if (scores.dim(1) != L) throw ShapeError("causal_softmax expects a square matrix");
    Tensor y({L, L});
    const double* xv = scores.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < L; ++i) {
        const double* row = xv + i * L;
        double m = row[0];
        for (std::size_t j = 1; j <= i; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            yv[i * L + j] = std::exp(row[j] - m);
            z += yv[i * L + j];
        }
        for (std::size_t j = 0; j <= i; ++j) yv[i * L + j] /= z;
    }
    if (ctx.tape) {
        prep(ctx, {scores, y});
        Tensor xc = scores, yc = y;
        ctx.tape->record([xc, yc, L]() mutable {
            const double* g = yc.grad().data();
            const double* yv = yc.values().data();
            double* xg = xc.grad().data();
            for (std::size_t i = 0; i < L; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += g[i * L + j] * yv[i * L + j];
                for (std::size_t j = 0; j <= i; ++j) {
                    xg[i * L + j] += yv[i * L + j] * (g[i * L + j] - dot);
                }
            }
        });
    }
    return y;
}

Tensor rmsnorm(const Ctx& ctx, const Tensor& x, const Tensor& gain, double eps) {
    require_rank2(x, "rmsnorm input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (d == 0) throw ShapeError("rmsnorm over empty rows");
    if (gain.size() != d) throw ShapeError("rmsnorm gain length must equal row width");
    Tensor y({n, d});
    Tensor inv({n});
    const double* xv = x.values().data();
    const double* gv = gain.values().data();
    double* yv = y.values().data();
    double* iv = inv.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += xv[i * d + j] * xv[i * d + j];
        ms = ms / static_cast<double>(d) + eps;
        iv[i] = 1.0 / std::sqrt(ms);
        for (std::size_t j = 0; j < d; ++j) yv[i * d + j] = xv[i * d + j] * iv[i] * gv[j];
    }
    if (ctx.tape) {
        prep(ctx, {x, gain, y});
        Tensor xc = x, gc = gain, yc = y;
        ctx.tape->record([xc, gc, yc, inv, n, d]() mutable {
            const double* g = yc.grad().data();
            const double* xv = xc.values().data();
            const double* gv = gc.values().data();
            const double* iv = inv.values().data();
            double* xg = xc.grad().data();
            double* gg = gc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * gv[j] * xv[i * d + j];
                const double c = iv[i] * iv[i] * iv[i] * dot / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    xg[i * d + j] += g[i * d + j] * gv[j] * iv[i] - xv[i * d + j] * c;
                    gg[j] += g[i * d + j] * xv[i * d + j] * iv[i];
                }
            }
        });
    }
    return y;
}

Tensor rope(const Ctx& ctx, const Tensor& x, std::size_t head_dim, std::size_t pos0, double base) {
    require_rank2(x, "rope input");
    const std::size_t L = x.dim(0), d = x.dim(1);
    if (head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0) {
        throw ShapeError("rope: head width must be even and divide row width");
    }
    const std::size_t pairs = head_dim / 2;
    std::vector<double> freqs(pairs);
    for (std::size_t p = 0; p < pairs; ++p) {
        freqs[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
    }
    auto rotate = [freqs, d, head_dim, pairs](const double* src, double* dst, double sign,
                                              std::size_t pos) {
        for (std::size_t h = 0; h < d; h += head_dim) {
            for (std::size_t p = 0; p < pairs; ++p) {
                const double theta = sign * static_cast<double>(pos) * freqs[p];
                const double c = std::cos(theta), s = std::sin(theta);
                const double a = src[h + 2 * p], b = src[h + 2 * p + 1];
                dst[h + 2 * p] = a * c - b * s;
                dst[h + 2 * p + 1] = a * s + b * c;
            }
        }
    };
    Tensor y({L, d});
    const double* xv = x.values().data();
    double* yv = y.values().data();
    for (std::size_t i = 0; i < L; ++i) rotate(xv + i * d, yv + i * d, 1.0, pos0 + i);
    if (ctx.tape) {
        prep(ctx, {x, y});
        Tensor xc = x, yc = y;
        ctx.tape->record([xc, yc, rotate, L, d, pos0]() mutable {
            const double* g = yc.grad().data();
            double* xg = xc.grad().data();
            std::vector<double> tmp(d);
            // The rotation is orthogonal; its adjoint is the inverse rotation.
            for (std::size_t i = 0; i < L; ++i) {
                rotate(g + i * d, tmp.data(), -1.0, pos0 + i);
                for (std::size_t j = 0; j < d; ++j) xg[i * d + j] += tmp[j];
            }
        });
    }
    return y;
}

Tensor cross_entropy(const Ctx& ctx, const Tensor& logits, std::span<const std::int32_t> targets) {
    require_rank2(logits, "cross_entropy logits");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (n == 0 || v == 0) throw ShapeError("cross_entropy over empty logits");
    if (targets.size() != n) throw ShapeError("cross_entropy: one target per row required");
    for (std::int32_t t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("cross_entropy target " + std::to_string(t) + " outside vocab " +
                             std::to_string(v));
        }
    }
    // Softmax rows are kept for the backward pass.
    Tensor probs({n, v});
    const double* lv = logits.values().data();
    double* pv = probs.values().data();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = lv + i * v;
        double m = row[0];
        for (std::size_t j = 1; j < v; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            pv[i * v + j] = std::exp(row[j] - m);
            z += pv[i * v + j];
        }
        const double logz = std::log(z) + m;
        for (std::size_t j = 0; j < v; ++j) pv[i * v + j] /= z;
        loss += logz - row[targets[i]];
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericError("cross_entropy produced a non-finite loss");
    Tensor y = Tensor::scalar(loss);
    if (ctx.tape) {
        prep(ctx, {logits, y});
        Tensor lc = logits, yc = y;
        std::vector<std::int32_t> tv(targets.begin(), targets.end());
        ctx.tape->record([lc, yc, probs, tv, n, v]() mutable {
            const double g = yc.grad()[0] / static_cast<double>(n);
            const double* pv = probs.values().data();
            double* lg = lc.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < v; ++j) lg[i * v + j] += g * pv[i * v + j];
                lg[i * v + static_cast<std::size_t>(tv[i])] -= g;
            }
        });
    }
    return y;
}

}  // namespace ops

GradCheckReport grad_check(const std::function<Tensor(const Ctx&)>& f, std::vector<Tensor> params,
                           double eps, double tol, std::size_t max_coords, std::uint64_t seed) {
    // Analytic pass.
    Tape tape;
    Ctx ctx{&tape, nullptr};
    for (Tensor& p : params) {
        p.ensure_grad();
        p.zero_grad();
    }
    Tensor loss = f(ctx);
    tape.backward(loss);

    GradCheckReport report;
    Rng rng(seed);
    const Ctx plain{};
    for (Tensor& p : params) {
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (coords.size() > max_coords) {
            for (std::size_t i = 0; i < max_coords; ++i) {
                const std::size_t j = i + rng.uniform_int(coords.size() - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(max_coords);
        }
        for (std::size_t c : coords) {
            const double saved = p.values()[c];
            p.values()[c] = saved + eps;
            const double up = f(plain).item();
            p.values()[c] = saved - eps;
            const double dn = f(plain).item();
            p.values()[c] = saved;
            if (!std::isfinite(up) || !std::isfinite(dn)) {
                throw NumericError("grad_check probe produced a non-finite value");
            }
            const double numeric = (up - dn) / (2.0 * eps);
            const double analytic = p.grad()[c];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            const double rel = std::abs(numeric - analytic) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.coords_checked;
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace stem
