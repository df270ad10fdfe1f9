#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stem/model.hpp"

namespace stem {

struct TrainConfig {
    double peak_lr = 2e-3;
    enum class Schedule { cosine, linear };
    Schedule schedule = Schedule::cosine;
    double warmup_ratio = 0.01;
    double min_lr_factor = 0.1;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    std::size_t batch_size = 1;
    std::size_t seq_len = 128;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;

    void validate() const;
};

// Linear warmup from 0 to peak over warmup_ratio*steps, then cosine (or
// linear) decay to min_lr_factor*peak at the final step.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct LossTrace {
    std::vector<double> loss;
    std::vector<double> lr;
};

void write_trace_csv(const std::string& path, const LossTrace& trace);

// First and second moments per parameter, keyed by checkpoint name.
struct AdamState {
    std::map<std::string, std::pair<Tensor, Tensor>> moments;  // m, v
    std::uint64_t t = 0;

    // Flattens into checkpoint extra tensors ("opt.m.<name>" / "opt.v.<name>").
    std::map<std::string, Tensor> to_tensors() const;
    static AdamState from_tensors(const std::map<std::string, Tensor>& tensors, std::uint64_t t);
};

// Single-tensor decoupled-weight-decay update with bias correction; t counts
// from 1.
void adamw_update(Tensor& param, std::span<const double> grad, Tensor& m, Tensor& v,
                  std::uint64_t t, double lr, const TrainConfig& cfg);

// Applies one optimizer step to every parameter from its accumulated grad.
// Throws NumericError on a non-finite gradient.
void adamw_step(Model& model, AdamState& state, const TrainConfig& cfg, double lr);

struct TrainResult {
    LossTrace trace;
    bool completed = false;
    std::string abort_reason;
};

// Deterministic training loop: per step, batch_size windows of seq_len + 1
// tokens are sampled from the corpus with the config seed. A non-finite loss
// aborts with the trace preserved.
TrainResult train(Model& model, std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                  AdamState* state = nullptr,
                  const std::function<void(std::size_t, const Model&)>& step_hook = nullptr);

// Number of steps whose loss exceeds the trailing-window mean by more than
// k standard deviations of that window.
std::size_t spike_count(const std::vector<double>& loss, std::size_t window = 100, double k = 4.0);

}  // namespace stem
