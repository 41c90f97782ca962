#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ebt/errors.hpp"
#include "ebt/harness/flops.hpp"
#include "ebt/harness/run.hpp"

namespace fs = std::filesystem;
using namespace ebt;
using namespace ebt::harness;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitInstability = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::int64_t> steps;
    std::optional<std::int64_t> candidates;
    std::optional<int> precision;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "run configuration (INI)");
    if (config_required) opt->required();
    cmd->add_option("--seed", c.seed, "override the run seed");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--precision", c.precision, "storage precision in bits")->check(CLI::IsMember({32, 64}));
}

RunConfig load_config(const Common& c) {
    auto cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.out) cfg.out_dir = *c.out;
    if (c.precision) cfg.precision = *c.precision == 32 ? Precision::F32 : Precision::F64;
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << text;
}

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> out;
    std::stringstream in(text);
    for (std::string part; std::getline(in, part, ',');) out.push_back(ini::parse_double("grid", part));
    return out;
}

int cmd_train(const Common& c) {
    auto cfg = load_config(c);
    if (c.steps) {
        cfg.train.total_steps = *c.steps;
        cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, *c.steps);
    }
    const auto r = run_train(cfg);
    std::cout << "trained " << r.history.size() << " steps, final loss " << r.final_record.loss
              << ", validation loss " << r.validation.loss << "\n"
              << "metrics: " << r.metrics_path << "\ncheckpoint: " << r.checkpoint_path << "\n";
    return 0;
}

EvalReport eval_report(const Common& c, const std::string& checkpoint, RunConfig& cfg) {
    cfg = load_config(c);
    return run_eval(checkpoint, cfg, c.steps.value_or(0), c.candidates.value_or(0));
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
    RunConfig cfg;
    const auto report = eval_report(c, checkpoint, cfg);
    const auto dir = fs::path(cfg.out_dir);
    write_text(dir / "eval.json", report.to_json().dump(2) + "\n");
    if (!report.traces.is_null()) write_text(dir / "trace.json", report.traces.dump() + "\n");
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_trace_export(const Common& c, const std::string& checkpoint, const std::string& file) {
    RunConfig cfg;
    const auto report = eval_report(c, checkpoint, cfg);
    if (report.traces.is_null()) throw ConfigError("baseline checkpoints have no energy trace");
    thinking::validate_trace_json(report.traces);
    const auto path = file.empty() ? fs::path(cfg.out_dir) / "trace.json" : fs::path(file);
    write_text(path, report.traces.dump(2) + "\n");
    std::cout << "wrote " << report.traces.size() << " context traces to " << path.string() << "\n";
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::string& grid, bool sqrt_batch) {
    const auto cfg = load_config(c);
    const auto report = run_sweep(sweep_axis_from_string(axis), parse_grid(grid), cfg, sqrt_batch);
    write_text(fs::path(cfg.out_dir) / "sweep.csv", report.csv());
    std::cout << report.csv() << "slope " << report.slope << (report.partial ? " (partial)" : "") << "\n";
    for (const auto& p : report.points)
        if (!p.ok) std::cerr << "point " << p.value << " failed: " << p.error << "\n";
    return 0;
}

int cmd_flops(const Common& c, std::optional<double> params, std::int64_t steps, double tokens,
              std::int64_t training_steps_count, bool measure) {
    double n = 0;
    if (params) {
        n = *params;
    } else {
        const auto cfg = load_config(c);
        n = static_cast<double>(EbtModel(cfg.model, 0).nonembedding_parameter_count());
    }
    const auto ebt = ebt_flop_report(n, steps, tokens, training_steps_count);
    const auto ff = ff_flop_report(n, tokens, training_steps_count);
    const auto ratio = ebt_to_ff_ratio(steps);
    nlohmann::json out = {
        {"nonembedding_params", n},
        {"steps", steps},
        {"ff", {{"per_token_flops", ff.per_token_flops}, {"per_step_flops", ff.per_step_flops}, {"total", ff.total}}},
        {"ebt", {{"per_token_flops", ebt.per_token_flops}, {"per_step_flops", ebt.per_step_flops}, {"total", ebt.total}}},
        {"ratio_vs_ff", ebt.ratio_vs_ff},
        {"ratio_fraction", std::to_string(ratio.num) + "/" + std::to_string(ratio.den)}};
    if (measure) {
        if (c.config.empty()) throw ConfigError("--measure needs --config");
        const auto m = measure_training_flops(load_config(c));
        out["measured"] = {{"nonembedding_params", m.nonembedding_params},
                           {"per_token_flops", m.per_token},
                           {"formula_per_token_flops", m.formula_per_token},
                           {"measured_over_formula", m.per_token / m.formula_per_token}};
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Energy-based transformer toolkit"};
    app.require_subcommand(1);

    Common train_opts, eval_opts, sweep_opts, flops_opts, trace_opts;
    std::string eval_ckpt, trace_ckpt, trace_file, axis, grid;
    std::optional<double> flops_params;
    std::int64_t flops_steps = 2, flops_training_steps = 1;
    double flops_tokens = 1;

    auto* train = app.add_subcommand("train", "train a model from a config");
    add_common(train, train_opts);
    train->add_option("--steps", train_opts.steps, "override total training steps");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with thinking settings");
    add_common(eval, eval_opts);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
    eval->add_option("--steps", eval_opts.steps, "thinking steps N");
    eval->add_option("--candidates", eval_opts.candidates, "self-verification candidates M");

    auto* sweep = app.add_subcommand("sweep", "train one run per grid value and fit a log-log slope");
    add_common(sweep, sweep_opts);
    sweep->add_option("--axis", axis, "width, depth, data or steps")->required();
    sweep->add_option("--grid", grid, "comma-separated values, at least three")->required();
    bool sqrt_batch = false;
    sweep->add_flag("--sqrt-batch", sqrt_batch, "scale batch size with the square root of the parameter count");

    auto* flops = app.add_subcommand("flops", "FLOP accounting for a model size");
    add_common(flops, flops_opts, false);
    flops->add_option("--params", flops_params, "non-embedding parameter count (else from --config)");
    flops->add_option("--steps", flops_steps, "energy-minimization steps");
    flops->add_option("--tokens", flops_tokens, "tokens per training step");
    flops->add_option("--training-steps", flops_training_steps, "training steps for totals");
    bool flops_measure = false;
    flops->add_flag("--measure", flops_measure, "also count matmul FLOPs of one training step of --config");

    auto* trace = app.add_subcommand("trace-export", "write energy traces as JSON");
    add_common(trace, trace_opts);
    trace->add_option("--checkpoint", trace_ckpt, "checkpoint to trace")->required();
    trace->add_option("--steps", trace_opts.steps, "thinking steps N");
    trace->add_option("--candidates", trace_opts.candidates, "self-verification candidates M");
    trace->add_option("--file", trace_file, "output file (default <out>/trace.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*train) return cmd_train(train_opts);
        if (*eval) return cmd_eval(eval_opts, eval_ckpt);
        if (*sweep) return cmd_sweep(sweep_opts, axis, grid, sqrt_batch);
        if (*flops) {
            if (!flops_params && flops_opts.config.empty()) throw ConfigError("flops needs --params or --config");
            return cmd_flops(flops_opts, flops_params, flops_steps, flops_tokens, flops_training_steps, flops_measure);
        }
        if (*trace) return cmd_trace_export(trace_opts, trace_ckpt, trace_file);
    } catch (const InstabilityError& e) {
        std::cerr << "numerical instability: " << e.what() << " (step " << e.step() << ", value " << e.norm() << ")\n";
        return kExitInstability;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractViolation& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
