#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "stem/analysis.hpp"
#include "stem/checkpoint.hpp"
#include "stem/corpus.hpp"
#include "stem/cost_model.hpp"
#include "stem/editing.hpp"
#include "stem/eval.hpp"
#include "stem/memory_sim.hpp"
#include "stem/runconfig.hpp"
#include "stem/threading.hpp"
#include "stem/tokenizer.hpp"
#include "stem/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stem;

namespace {

std::string default_out_root() {
    if (const char* env = std::getenv("STEM_OUT_ROOT")) return env;
    return "runs";
}

fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

std::vector<std::int32_t> parse_ids(const std::string& text) {
    std::vector<std::int32_t> ids;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            ids.push_back(static_cast<std::int32_t>(std::stol(cur)));
            cur.clear();
        }
    };
    for (char c : text) {
        if (c == ',' || c == ' ') {
            flush();
        } else {
            cur.push_back(c);
        }
    }
    flush();
    if (ids.empty()) throw ConfigError("expected a comma-separated token id list");
    return ids;
}

// First occurrence of `needle` as a contiguous subsequence.
std::vector<std::size_t> locate_span(const std::vector<std::int32_t>& prompt,
                                     const std::vector<std::int32_t>& needle) {
    if (needle.empty() || needle.size() > prompt.size()) {
        throw ConfigError("source span not found in prompt");
    }
    for (std::size_t start = 0; start + needle.size() <= prompt.size(); ++start) {
        bool match = true;
        for (std::size_t i = 0; i < needle.size(); ++i) {
            if (prompt[start + i] != needle[i]) {
                match = false;
                break;
            }
        }
        if (match) {
            std::vector<std::size_t> positions(needle.size());
            for (std::size_t i = 0; i < needle.size(); ++i) positions[i] = start + i;
            return positions;
        }
    }
    throw ConfigError("source span not found in prompt");
}

json topk_json(const std::vector<std::pair<std::int32_t, double>>& ranked) {
    json out = json::array();
    for (const auto& [token, p] : ranked) {
        out.push_back({{"token", token}, {"p", p}});
    }
    return out;
}

// Reports are reproducible from the manifest alone: command, arguments, hash.
void write_cli_manifest(const fs::path& out, const std::string& command, json args) {
    json m;
    m["command"] = command;
    m["args"] = args;
    m["config_hash"] = config_hash(args);
    m["version"] = "1.0.0";
    write_json((out / "manifest.json").string(), m);
}

int run_train(const std::string& config_path, const std::string& out_override,
              long steps_override, long seed_override) {
    RunConfig config = load_run_config(config_path);
    if (!out_override.empty()) config.out_dir = out_override;
    if (steps_override > 0) config.train.steps = static_cast<std::size_t>(steps_override);
    if (seed_override >= 0) {
        config.train.seed = static_cast<std::uint64_t>(seed_override);
        config.model_seed = static_cast<std::uint64_t>(seed_override);
    }
    config.finalize();
    const fs::path out = prepare_out_dir(config.out_dir);
    write_json((out / "manifest.json").string(), make_manifest("train", config));

    const auto tokens = build_corpus(config);
    Model model = build_model(config.model, config.model_seed);
    AdamState opt;
    auto result = train(model, tokens, config.train, &opt);
    write_trace_csv((out / "trace.csv").string(), result.trace);
    save_checkpoint((out / "model.ckpt").string(), model, result.trace.loss.size(),
                    opt.to_tensors());
    json summary;
    summary["completed"] = result.completed;
    summary["steps"] = result.trace.loss.size();
    if (!result.trace.loss.empty()) {
        summary["first_loss"] = result.trace.loss.front();
        summary["last_loss"] = result.trace.loss.back();
    }
    summary["spikes_w100_k4"] = spike_count(result.trace.loss, 100, 4.0);
    if (!result.completed) summary["abort_reason"] = result.abort_reason;
    write_json((out / "train_summary.json").string(), summary);
    std::cout << summary.dump(2) << std::endl;
    return result.completed ? 0 : 4;
}

int run_eval(const std::string& ckpt_path, const std::string& lengths_arg, std::size_t instances,
             std::size_t seq_len, std::uint64_t seed, const std::string& out_dir) {
    auto loaded = load_checkpoint(ckpt_path);
    const Model& model = loaded.model;
    const fs::path out = prepare_out_dir(out_dir);

    write_cli_manifest(out, "eval",
                       json{{"checkpoint", ckpt_path}, {"lengths", lengths_arg},
                            {"instances", instances}, {"seq_len", seq_len}, {"seed", seed}});
    auto lengths = parse_ids(lengths_arg);
    std::ofstream csv(out / "eval.csv");
    csv << "length,accuracy,ppl,activated_params\n";
    const auto table_layers = model.config.table_layers().size();

    // Held-out synthetic text for perplexity, seeded apart from training.
    auto val_corpus = corpus::markov(std::max<std::size_t>(seq_len * 64, 4096),
                                     model.config.vocab, seed + 1);
    json rows = json::array();
    for (std::int32_t len : lengths) {
        const auto length = static_cast<std::size_t>(len);
        if (length > model.config.max_len) {
            throw ConfigError("length " + std::to_string(len) + " exceeds model max_len");
        }
        std::vector<eval::NiahInstance> batch;
        for (std::size_t i = 0; i < instances; ++i) {
            batch.push_back(eval::build_niah(length, model.config.vocab, seed + 100 * i + len));
        }
        const double acc = eval::score_retrieval(eval::model_logits(model), batch);
        const double ppl = eval::val_ppl(model, val_corpus, std::min(seq_len, length));
        std::uint64_t activated = 0;
        for (const auto& inst : batch) {
            activated +=
                cost::activated_params(table_layers, model.config.d_ff, inst.context);
        }
        activated /= instances == 0 ? 1 : instances;
        csv << len << ',' << acc << ',' << ppl << ',' << activated << '\n';
        rows.push_back({{"length", len}, {"accuracy", acc}, {"ppl", ppl},
                        {"activated_params", activated}});
    }
    json summary;
    summary["rows"] = rows;
    write_json((out / "eval_summary.json").string(), summary);
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int run_analyze(const std::string& ckpt_path, long layer_arg, std::size_t pairs,
                std::uint64_t seed, const std::string& out_dir) {
    auto loaded = load_checkpoint(ckpt_path);
    const Model& model = loaded.model;
    const fs::path out = prepare_out_dir(out_dir);

    write_cli_manifest(out, "analyze",
                       json{{"checkpoint", ckpt_path}, {"layer", layer_arg}, {"pairs", pairs},
                            {"seed", seed}});
    const auto table_layers = model.config.table_layers();
    std::size_t layer = layer_arg >= 0 ? static_cast<std::size_t>(layer_arg)
                                       : (table_layers.empty() ? 0 : table_layers.front());

    json summary;
    // A held-out batch drives the activation-space histograms.
    auto probe = corpus::markov(256, model.config.vocab, seed + 7);
    std::vector<std::int32_t> batch(probe.begin(),
                                    probe.begin() + std::min<std::size_t>(model.config.max_len,
                                                                          probe.size()));

    if (std::find(table_layers.begin(), table_layers.end(), layer) != table_layers.end()) {
        auto hist = analysis::pairwise_cosine(model.layers[layer].table, pairs, seed, 200,
                                              "table_rows");
        analysis::write_histogram_csv((out / "table_cosine.csv").string(), hist);
        summary["table_rows"] = {{"mean", hist.mean}, {"mean_abs", hist.mean_abs},
                                 {"stddev", hist.stddev}, {"pairs", hist.pair_count}};
    }
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        if (model.layers[li].ffn.w_up.defined()) {
            Tensor up = analysis::address_vectors(model, batch, li, analysis::AddressKind::up_output);
            auto hist = analysis::pairwise_cosine(up, pairs, seed, 200, "up_output");
            analysis::write_histogram_csv((out / "up_output_cosine.csv").string(), hist);
            summary["up_output"] = {{"layer", li}, {"mean", hist.mean},
                                    {"mean_abs", hist.mean_abs}, {"stddev", hist.stddev}};
            break;
        }
    }
    {
        Tensor gated = analysis::address_vectors(model, batch, layer, analysis::AddressKind::gated);
        auto hist = analysis::pairwise_cosine(gated, pairs, seed, 200, "gated");
        analysis::write_histogram_csv((out / "gated_cosine.csv").string(), hist);
        summary["gated"] = {{"layer", layer}, {"mean", hist.mean}, {"mean_abs", hist.mean_abs},
                            {"stddev", hist.stddev}};
    }
    {
        auto text = corpus::markov(100000, model.config.vocab, seed + 13);
        std::vector<std::size_t> ladder{1000, 3000, 10000, 30000, 100000};
        auto fit = analysis::heaps_fit_over_corpus(text, ladder);
        summary["heaps"] = {{"k", fit.k}, {"beta", fit.beta}, {"residual", fit.residual}};
    }
    write_json((out / "analysis.json").string(), summary);
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int run_edit(const std::string& ckpt_path, const std::string& prompt_arg,
             const std::string& source_arg, const std::string& target_arg,
             const std::string& scheme_arg, std::size_t topk, const std::string& out_dir) {
    auto loaded = load_checkpoint(ckpt_path);
    const Model& model = loaded.model;
    const fs::path out = prepare_out_dir(out_dir);

    write_cli_manifest(out, "edit",
                       json{{"checkpoint", ckpt_path}, {"prompt", prompt_arg},
                            {"source", source_arg}, {"target", target_arg},
                            {"scheme", scheme_arg}, {"topk", topk}});
    const auto prompt = parse_ids(prompt_arg);
    const auto source = parse_ids(source_arg);
    const auto target = parse_ids(target_arg);
    const auto positions = locate_span(prompt, source);

    const edit::Scheme scheme = edit::scheme_from_name(scheme_arg);
    const auto plan = edit::plan_edit(model, source, target, scheme);
    const auto edited = edit::apply_edit(model, positions, plan);

    Tensor pre_logits = forward(model, prompt);
    Tensor post_logits = edit::forward_edited(edited, prompt);
    const std::size_t last = pre_logits.dim(0) - 1;
    std::vector<double> pre_row(pre_logits.dim(1)), post_row(post_logits.dim(1));
    for (std::size_t j = 0; j < pre_row.size(); ++j) {
        pre_row[j] = pre_logits.at(last, j);
        post_row[j] = post_logits.at(last, j);
    }
    json report;
    report["scheme"] = plan.scheme;
    report["positions"] = positions;
    report["pre_topk"] = topk_json(edit::topk_next(pre_row, topk));
    report["post_topk"] = topk_json(edit::topk_next(post_row, topk));
    write_json((out / "edit.json").string(), report);
    std::cout << report.dump(2) << std::endl;
    return 0;
}

int run_simulate(std::size_t vocab, double zipf_s, std::size_t accesses, std::size_t capacity,
                 std::size_t layers, std::size_t d_ff, double latency, double bandwidth,
                 double compute, const std::string& mode, std::size_t batch, std::size_t seq_len,
                 std::uint64_t seed, const std::string& out_dir) {
    const fs::path out = prepare_out_dir(out_dir);
    write_cli_manifest(out, "simulate",
                       json{{"vocab", vocab}, {"zipf_s", zipf_s}, {"accesses", accesses},
                            {"capacity", capacity}, {"layers", layers}, {"d_ff", d_ff},
                            {"latency", latency}, {"bandwidth", bandwidth},
                            {"compute", compute}, {"mode", mode}, {"batch", batch},
                            {"seq_len", seq_len}, {"seed", seed}});
    sim::TierModel tier{latency, bandwidth, compute};
    sim::LfuCache cache(capacity);
    sim::SimReport report;
    if (mode == "decode") {
        auto stream = sim::zipf_stream(vocab, zipf_s, accesses, seed);
        report = sim::simulate_decode(stream, cache, tier, layers, d_ff);
    } else if (mode == "prefill") {
        std::vector<std::vector<std::int32_t>> batch_ids;
        auto stream = sim::zipf_stream(vocab, zipf_s, batch * seq_len, seed);
        for (std::size_t b = 0; b < batch; ++b) {
            batch_ids.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(b * seq_len),
                                   stream.begin() + static_cast<std::ptrdiff_t>((b + 1) * seq_len));
        }
        report = sim::simulate_prefill(batch_ids, cache, tier, layers, d_ff);
    } else {
        throw ConfigError("mode must be 'prefill' or 'decode'");
    }
    std::ofstream csv(out / "sim_trace.csv");
    csv << "step,stall\n";
    for (std::size_t i = 0; i < report.per_step_stall.size(); ++i) {
        csv << i << ',' << report.per_step_stall[i] << '\n';
    }
    json j;
    j["mode"] = mode;
    j["hits"] = report.hits;
    j["misses"] = report.misses;
    j["hit_rate"] = report.hit_rate;
    j["hit_rate_steady"] = report.hit_rate_steady;
    j["elements_transferred"] = report.elements_transferred;
    j["total_time"] = report.total_time;
    j["stall_time"] = report.stall_time;
    j["overlap_fraction"] = report.overlap_fraction;
    write_json((out / "sim.json").string(), j);
    std::cout << j.dump(2) << std::endl;
    return 0;
}

int run_cost(double d, double d_ff, double seq_len, double batch, std::size_t vocab,
             std::uint64_t seed, const std::string& out_dir) {
    const fs::path out = prepare_out_dir(out_dir);
    write_cli_manifest(out, "cost",
                       json{{"d", d}, {"d_ff", d_ff}, {"seq_len", seq_len}, {"batch", batch},
                            {"vocab", vocab}, {"seed", seed}});
    cost::ArchHyperparams h{d, d_ff, seq_len, batch, static_cast<double>(vocab)};
    // Token statistics for the communication columns come from a Zipf draw.
    auto batch_tokens =
        sim::zipf_stream(vocab, 1.0, static_cast<std::size_t>(batch * seq_len), seed);
    auto decode_tokens = sim::zipf_stream(vocab, 1.0, static_cast<std::size_t>(batch), seed + 1);
    auto report = cost::make_report(h, batch_tokens, decode_tokens);

    json j;
    j["d"] = d;
    j["d_ff"] = d_ff;
    j["seq_len"] = seq_len;
    j["batch"] = batch;
    j["prefill_flops_base"] = report.prefill_flops_base;
    j["prefill_flops_stem"] = report.prefill_flops_stem;
    j["train_flops_base"] = report.train_flops_base;
    j["train_flops_stem"] = report.train_flops_stem;
    j["decode_mem_base"] = report.decode_mem_base;
    j["decode_mem_stem"] = report.decode_mem_stem;
    j["decode_param_bytes_base"] = report.decode_param_bytes_base;
    j["decode_param_bytes_stem"] = report.decode_param_bytes_stem;
    j["prefill_delta"] = report.prefill_delta;
    j["train_delta"] = report.train_delta;
    j["decode_delta"] = report.decode_delta;
    j["saving_fraction"] = report.saving;
    j["comm_elements_prefill"] = report.comm_elements_prefill;
    j["comm_elements_decode"] = report.comm_elements_decode;
    j["comm_elements_training"] = report.comm_elements_training;
    write_json((out / "cost.json").string(), j);

    std::ofstream csv(out / "cost.csv");
    csv << "metric,base,stem,delta\n";
    csv << "prefill_flops," << report.prefill_flops_base << ',' << report.prefill_flops_stem
        << ',' << report.prefill_delta << '\n';
    csv << "train_flops," << report.train_flops_base << ',' << report.train_flops_stem << ','
        << report.train_delta << '\n';
    csv << "decode_mem," << report.decode_mem_base << ',' << report.decode_mem_stem << ','
        << report.decode_delta << '\n';
    csv << "saving_fraction,," << report.saving << ",\n";
    std::cout << j.dump(2) << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale lab for token-indexed static-sparsity FFN transformers"};
    app.require_subcommand(1);

    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (0 = auto)");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON run config");
    std::string train_config, train_out;
    long train_steps = -1, train_seed = -1;
    train_cmd->add_option("--config", train_config, "Run config JSON")->required();
    train_cmd->add_option("--out", train_out, "Output directory (overrides config)");
    train_cmd->add_option("--steps", train_steps, "Step count override");
    train_cmd->add_option("--seed", train_seed, "Seed override (model + data order)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate retrieval accuracy and perplexity");
    std::string eval_ckpt, eval_lengths = "128,256,512", eval_out = default_out_root() + "/eval";
    std::size_t eval_instances = 50, eval_seq = 128;
    std::uint64_t eval_seed = 0;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--lengths", eval_lengths, "Comma-separated context lengths");
    eval_cmd->add_option("--instances", eval_instances, "Instances per length");
    eval_cmd->add_option("--seq-len", eval_seq, "Perplexity window length");
    eval_cmd->add_option("--seed", eval_seed, "Instance seed");
    eval_cmd->add_option("--out", eval_out, "Output directory");

    // analyze
    auto* an_cmd = app.add_subcommand("analyze", "Address-vector geometry and unique-token growth");
    std::string an_ckpt, an_out = default_out_root() + "/analysis";
    long an_layer = -1;
    std::size_t an_pairs = 100000;
    std::uint64_t an_seed = 0;
    an_cmd->add_option("--checkpoint", an_ckpt, "Checkpoint path")->required();
    an_cmd->add_option("--layer", an_layer, "Table layer to analyze (default: first)");
    an_cmd->add_option("--pairs", an_pairs, "Sampled row pairs");
    an_cmd->add_option("--seed", an_seed, "Sampling seed");
    an_cmd->add_option("--out", an_out, "Output directory");

    // edit
    auto* edit_cmd = app.add_subcommand("edit", "Swap table rows and compare next-token ranks");
    std::string e_ckpt, e_prompt, e_source, e_target, e_scheme = "equal_swap";
    std::string e_out = default_out_root() + "/edit";
    std::size_t e_topk = 4;
    edit_cmd->add_option("--checkpoint", e_ckpt, "Checkpoint path")->required();
    edit_cmd->add_option("--prompt", e_prompt, "Prompt token ids (comma separated)")->required();
    edit_cmd->add_option("--source", e_source, "Source entity token ids")->required();
    edit_cmd->add_option("--target", e_target, "Target entity token ids")->required();
    edit_cmd->add_option("--scheme", e_scheme,
                         "equal_swap|pad_left|pad_right|copy|subset|average");
    edit_cmd->add_option("--topk", e_topk, "Ranks to report");
    edit_cmd->add_option("--out", e_out, "Output directory");

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "Offload/prefetch cache simulation");
    std::size_t s_vocab = 50000, s_accesses = 1000000, s_capacity = 5000, s_layers = 1,
                s_dff = 512, s_batch = 8, s_seq = 128;
    double s_zipf = 1.0, s_latency = 1.0, s_bandwidth = 1024.0, s_compute = 64.0;
    std::uint64_t s_seed = 0;
    std::string s_mode = "decode", s_out = default_out_root() + "/sim";
    sim_cmd->add_option("--vocab", s_vocab, "Vocabulary size");
    sim_cmd->add_option("--zipf-s", s_zipf, "Zipf exponent");
    sim_cmd->add_option("--accesses", s_accesses, "Decode steps");
    sim_cmd->add_option("--capacity", s_capacity, "Cache capacity in rows");
    sim_cmd->add_option("--layers", s_layers, "Table layer count");
    sim_cmd->add_option("--d-ff", s_dff, "Row width in elements");
    sim_cmd->add_option("--latency", s_latency, "Host transfer latency (time units)");
    sim_cmd->add_option("--bandwidth", s_bandwidth, "Host bandwidth (elements per time unit)");
    sim_cmd->add_option("--compute", s_compute, "Per-layer compute time");
    sim_cmd->add_option("--mode", s_mode, "prefill or decode");
    sim_cmd->add_option("--batch", s_batch, "Prefill batch size");
    sim_cmd->add_option("--seq-len", s_seq, "Prefill sequence length");
    sim_cmd->add_option("--seed", s_seed, "Stream seed");
    sim_cmd->add_option("--out", s_out, "Output directory");

    // cost
    auto* cost_cmd = app.add_subcommand("cost", "Analytic per-layer cost report");
    double c_d = 1536, c_dff = 8960, c_seq = 4096, c_batch = 1;
    std::size_t c_vocab = 50000;
    std::uint64_t c_seed = 0;
    std::string c_out = default_out_root() + "/cost";
    cost_cmd->add_option("--d", c_d, "Model width");
    cost_cmd->add_option("--d-ff", c_dff, "FFN width");
    cost_cmd->add_option("--seq-len", c_seq, "Context length");
    cost_cmd->add_option("--batch", c_batch, "Batch size");
    cost_cmd->add_option("--vocab", c_vocab, "Vocabulary for the communication columns");
    cost_cmd->add_option("--seed", c_seed, "Token draw seed");
    cost_cmd->add_option("--out", c_out, "Output directory");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) set_num_threads(threads);

    try {
        if (*train_cmd) return run_train(train_config, train_out, train_steps, train_seed);
        if (*eval_cmd) {
            return run_eval(eval_ckpt, eval_lengths, eval_instances, eval_seq, eval_seed, eval_out);
        }
        if (*an_cmd) return run_analyze(an_ckpt, an_layer, an_pairs, an_seed, an_out);
        if (*edit_cmd) return run_edit(e_ckpt, e_prompt, e_source, e_target, e_scheme, e_topk, e_out);
        if (*sim_cmd) {
            return run_simulate(s_vocab, s_zipf, s_accesses, s_capacity, s_layers, s_dff, s_latency,
                                s_bandwidth, s_compute, s_mode, s_batch, s_seq, s_seed, s_out);
        }
        if (*cost_cmd) return run_cost(c_d, c_dff, c_seq, c_batch, c_vocab, c_seed, c_out);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << std::endl;
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << e.what() << std::endl;
        return 3;
    } catch (const IndexError& e) {
        std::cerr << e.what() << std::endl;
        return 3;
    } catch (const NumericError& e) {
        std::cerr << e.what() << std::endl;
        return 4;
    } catch (const IoError& e) {
        std::cerr << e.what() << std::endl;
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
