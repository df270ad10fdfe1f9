#include "stem/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace stem {

void TrainConfig::validate() const {
    if (peak_lr <= 0) throw ConfigError("peak_lr must be positive");
    if (warmup_ratio <= 0 || warmup_ratio >= 1) throw ConfigError("warmup_ratio must be in (0,1)");
    if (min_lr_factor <= 0 || min_lr_factor > 1) {
        throw ConfigError("min_lr_factor must be in (0,1]");
    }
    if (batch_size == 0 || seq_len == 0 || steps == 0) {
        throw ConfigError("batch_size, seq_len and steps must be positive");
    }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
    const double total = static_cast<double>(cfg.steps);
    double warmup = std::round(cfg.warmup_ratio * total);
    if (warmup < 1) warmup = 1;
    const double s = static_cast<double>(step);
    if (s <= warmup) return cfg.peak_lr * s / warmup;
    const double min_lr = cfg.min_lr_factor * cfg.peak_lr;
    const double span = total - warmup;
    const double frac = span > 0 ? (s - warmup) / span : 1.0;
    if (cfg.schedule == TrainConfig::Schedule::linear) {
        return cfg.peak_lr - (cfg.peak_lr - min_lr) * frac;
    }
    return min_lr + (cfg.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

void write_trace_csv(const std::string& path, const LossTrace& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "step,loss,lr\n";
    char buf[80];
    for (std::size_t i = 0; i < trace.loss.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, trace.loss[i], trace.lr[i]);
        out << buf;
    }
}

std::map<std::string, Tensor> AdamState::to_tensors() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, mv] : moments) {
        out.emplace("opt.m." + name, mv.first);
        out.emplace("opt.v." + name, mv.second);
    }
    return out;
}

AdamState AdamState::from_tensors(const std::map<std::string, Tensor>& tensors, std::uint64_t t) {
    AdamState state;
    state.t = t;
    for (const auto& [name, tensor] : tensors) {
        if (name.rfind("opt.m.", 0) == 0) {
            state.moments[name.substr(6)].first = tensor;
        } else if (name.rfind("opt.v.", 0) == 0) {
            state.moments[name.substr(6)].second = tensor;
        }
    }
    return state;
}

void adamw_update(Tensor& param, std::span<const double> grad, Tensor& m, Tensor& v,
                  std::uint64_t t, double lr, const TrainConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    double* pv = param.values().data();
    double* mv = m.values().data();
    double* vv = v.values().data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * g;
        vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = mv[i] / bc1;
        const double vhat = vv[i] / bc2;
        pv[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * pv[i]);
    }
}

void adamw_step(Model& model, AdamState& state, const TrainConfig& cfg, double lr) {
    ++state.t;
    model.visit_params([&](const std::string& name, Tensor& param) {
        if (!param.has_grad()) param.ensure_grad();
        for (double g : param.grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in '" + name + "' at step " +
                                   std::to_string(state.t));
            }
        }
        auto& [m, v] = state.moments[name];
        if (!m.defined()) {
            m = Tensor(std::vector<std::size_t>(param.shape()));
            v = Tensor(std::vector<std::size_t>(param.shape()));
        }
        adamw_update(param, {param.grad().data(), param.size()}, m, v, state.t, lr, cfg);
    });
}

TrainResult train(Model& model, std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                  AdamState* state, const std::function<void(std::size_t, const Model&)>& step_hook) {
    cfg.validate();
    if (corpus.size() < cfg.seq_len + 1) {
        throw ConfigError("corpus shorter than one training window");
    }
    AdamState local;
    AdamState& opt = state != nullptr ? *state : local;
    Rng batch_rng(cfg.seed);

    TrainResult result;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Ctx ctx{&tape, nullptr};
        Tensor total;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t start = batch_rng.uniform_int(corpus.size() - cfg.seq_len);
            std::span<const std::int32_t> window = corpus.subspan(start, cfg.seq_len);
            std::span<const std::int32_t> targets = corpus.subspan(start + 1, cfg.seq_len);
            ForwardOptions opts;
            opts.tape = &tape;
            Tensor logits = forward(model, window, opts);
            Tensor loss = ops::cross_entropy(ctx, logits, targets);
            total = total.defined() ? ops::add(ctx, total, loss) : loss;
        }
        if (cfg.batch_size > 1) {
            total = ops::scale(ctx, total, 1.0 / static_cast<double>(cfg.batch_size));
        }
        const double loss_value = total.item();
        const double lr = lr_at(step + 1, cfg);
        if (!std::isfinite(loss_value)) {
            result.abort_reason = "non-finite loss at step " + std::to_string(step);
            return result;
        }
        result.trace.loss.push_back(loss_value);
        result.trace.lr.push_back(lr);

        model.visit_params([](const std::string&, Tensor& p) {
            p.ensure_grad();
            p.zero_grad();
        });
        tape.backward(total);
        adamw_step(model, opt, cfg, lr);
        if (step_hook) step_hook(step, model);
    }
    result.completed = true;
    return result;
}

std::size_t spike_count(const std::vector<double>& loss, std::size_t window, double k) {
    if (window < 2) throw ConfigError("spike window must be at least 2");
    std::size_t spikes = 0;
    for (std::size_t i = window; i < loss.size(); ++i) {
        double mean = 0.0;
        for (std::size_t j = i - window; j < i; ++j) mean += loss[j];
        mean /= static_cast<double>(window);
        double var = 0.0;
        for (std::size_t j = i - window; j < i; ++j) {
            var += (loss[j] - mean) * (loss[j] - mean);
        }
        var /= static_cast<double>(window);
        if (loss[i] > mean + k * std::sqrt(var)) ++spikes;
    }
    return spikes;
}

}  // namespace stem
