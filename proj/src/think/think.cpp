#include "ebt/think/think.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "ebt/autodiff/ops.hpp"

namespace ebt::thinking {

namespace o = ebt::ops;

namespace {

struct Trajectory {
    Tensor prediction;
    CandidateTrace trace;
};

void check_energy(const Tensor& e, std::int64_t step) {
    for (double v : e.data()) {
        if (!std::isfinite(v)) {
            throw InstabilityError("non-finite energy at thinking step " + std::to_string(step), step, v);
        }
    }
}

Trajectory run_trajectory(const StepEnergy& energy, const Shape& shape, double alpha, const ThinkOptions& opts,
                          std::uint64_t seed) {
    const auto b = shape[0], s = shape[1], k = shape[2];
    Rng rng(seed);
    Tensor y = opts.initial.defined() ? opts.initial.detach() : init_prediction(b, s, k, rng);

    std::vector<double> a(static_cast<std::size_t>(b * s), alpha);
    if (opts.randomize_alpha && opts.alpha_random_factor != 1.0) {
        const double r = opts.alpha_random_factor;
        for (auto& v : a) v = alpha * rng.uniform(1.0 / r, r);
    }
    const auto alpha_eff = Tensor::from_data({b, s}, std::move(a));

    ThinkStepOptions step_opts;
    step_opts.grad_clamp = opts.grad_clamp;
    step_opts.rng = &rng;

    Trajectory out;
    for (std::int64_t i = 0; i < opts.steps; ++i) {
        step_opts.step = i;
        step_opts.sigma = i + 1 < opts.steps ? opts.sigma : 0.0;
        const auto r = ebt::think_step([&](const Tensor& p) { return energy(p, i); }, y, alpha_eff, step_opts);
        check_energy(r.energy, i);
        out.trace.energies.push_back(r.energy.detach());
        y = r.prediction;
        ++out.trace.steps_taken;
        if (opts.early_stop_tol && i >= 1) {
            const auto& prev = out.trace.energies[out.trace.energies.size() - 2].data();
            const auto& cur = out.trace.energies.back().data();
            double change = 0.0;
            for (std::size_t j = 0; j < cur.size(); ++j) change = std::max(change, std::abs(cur[j] - prev[j]));
            if (change < *opts.early_stop_tol) break;
        }
    }
    {
        NoGradGuard guard;
        const auto e = energy(y, out.trace.steps_taken);
        check_energy(e, out.trace.steps_taken);
        out.trace.energies.push_back(e.detach());
    }
    out.prediction = y.detach();
    return out;
}

void check_options(const Shape& shape, const ThinkOptions& opts) {
    EBT_REQUIRE(shape.size() == 3, "prediction shape must be [B, S, K], got " + shape_str(shape));
    EBT_REQUIRE(opts.steps >= 1, "thinking needs at least one step, got " + std::to_string(opts.steps));
    EBT_REQUIRE(opts.sigma >= 0.0, "langevin sigma must be >= 0");
    EBT_REQUIRE(opts.alpha_random_factor >= 1.0, "alpha random factor must be >= 1");
    if (opts.early_stop_tol) EBT_REQUIRE(*opts.early_stop_tol > 0.0, "early-stop tolerance must be positive");
    if (opts.initial.defined()) {
        EBT_REQUIRE(opts.initial.shape() == shape, "initial prediction " + shape_str(opts.initial.shape()) +
                                                       " does not match " + shape_str(shape));
    }
}

StepEnergy model_energy(const EbtModel& model, const Context& ctx) {
    return [&model, ctx](const Tensor& y, std::int64_t step) { return model.energy(ctx, y, step); };
}

Shape model_shape(const EbtModel& model, const Context& ctx) {
    return {ctx.batch, ctx.length, model.config().prediction_dim()};
}

ThinkOptions with_model_defaults(const EbtModel& model, ThinkOptions opts) {
    if (!opts.grad_clamp) opts.grad_clamp = model.config().grad_clamp;
    if (opts.randomize_alpha && opts.alpha_random_factor == 1.0) {
        opts.alpha_random_factor = model.config().alpha_random_factor;
    }
    return opts;
}

}  // namespace

Tensor EnergyTrace::final_energy() const {
    EBT_REQUIRE(!candidates.empty(), "empty trace");
    std::vector<double> out(static_cast<std::size_t>(batch * length));
    for (std::size_t p = 0; p < out.size(); ++p) {
        out[p] = candidates[static_cast<std::size_t>(chosen[p])].final_energy().data()[p];
    }
    return Tensor::from_data({batch, length}, std::move(out));
}

ThinkResult think(const StepEnergy& energy, const Shape& shape, double alpha, const ThinkOptions& opts) {
    return self_verify(energy, shape, alpha, opts, 1);
}

ThinkResult think(const EbtModel& model, const Context& ctx, const ThinkOptions& opts) {
    return self_verify(model, ctx, opts, 1);
}

ThinkResult self_verify(const StepEnergy& energy, const Shape& shape, double alpha, const ThinkOptions& opts,
                        std::int64_t candidates) {
    check_options(shape, opts);
    EBT_REQUIRE(candidates >= 1, "need at least one candidate, got " + std::to_string(candidates));
    EBT_REQUIRE(alpha >= 0.0, "step size must be non-negative");

    std::vector<Trajectory> runs(static_cast<std::size_t>(candidates));
    const auto run = [&](std::int64_t j) {
        runs[static_cast<std::size_t>(j)] = run_trajectory(energy, shape, alpha, opts, derive_seed(opts.seed, j));
    };
    if (opts.parallel && candidates > 1) {
        std::vector<std::exception_ptr> errors(runs.size());
        std::vector<std::thread> workers;
        for (std::int64_t j = 0; j < candidates; ++j) {
            workers.emplace_back([&, j] {
                try {
                    run(j);
                } catch (...) {
                    errors[static_cast<std::size_t>(j)] = std::current_exception();
                }
            });
        }
        for (auto& w : workers) w.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    } else {
        for (std::int64_t j = 0; j < candidates; ++j) run(j);
    }

    const auto b = shape[0], s = shape[1], k = shape[2];
    ThinkResult result;
    auto& trace = result.trace;
    trace.batch = b;
    trace.length = s;
    trace.chosen.assign(static_cast<std::size_t>(b * s), 0);
    for (std::size_t j = 0; j < runs.size(); ++j) {
        const auto& e = runs[j].trace.final_energy().data();
        for (std::size_t p = 0; p < trace.chosen.size(); ++p) {
            const auto best = static_cast<std::size_t>(trace.chosen[p]);
            if (e[p] < runs[best].trace.final_energy().data()[p]) trace.chosen[p] = static_cast<std::int64_t>(j);
        }
    }
    std::vector<double> pred(static_cast<std::size_t>(b * s * k));
    for (std::size_t p = 0; p < trace.chosen.size(); ++p) {
        const auto& src = runs[static_cast<std::size_t>(trace.chosen[p])].prediction.data();
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(p * k), k, pred.begin() + static_cast<std::ptrdiff_t>(p * k));
    }
    result.prediction = Tensor::from_data(shape, std::move(pred));
    for (auto& r : runs) {
        trace.nfe += r.trace.steps_taken;
        ++trace.verification_passes;
        trace.candidates.push_back(std::move(r.trace));
    }
    return result;
}

ThinkResult self_verify(const EbtModel& model, const Context& ctx, const ThinkOptions& opts, std::int64_t candidates) {
    const auto o2 = with_model_defaults(model, opts);
    return self_verify(model_energy(model, ctx), model_shape(model, ctx), opts.alpha.value_or(model.alpha_value()), o2,
                       candidates);
}

SttReport stt(double f0, double f, bool higher_is_better) {
    EBT_REQUIRE(f0 > 0.0, "baseline metric must be positive");
    if (!higher_is_better) EBT_REQUIRE(f > 0.0, "loss-like metric must be positive to invert the ratio");
    SttReport r{f0, f, 0.0};
    r.stt = higher_is_better ? f / f0 - 1.0 : f0 / f - 1.0;
    return r;
}

std::int64_t count_nfe(const EnergyTrace& trace) { return trace.nfe; }

nlohmann::json trace_to_json(const EnergyTrace& trace, const Context& ctx, std::int64_t first_context_id) {
    EBT_REQUIRE(ctx.batch == trace.batch && ctx.length == trace.length, "context does not match the trace");
    auto rows = nlohmann::json::array();
    for (std::int64_t b = 0; b < trace.batch; ++b) {
        auto positions = nlohmann::json::array();
        for (std::int64_t s = 0; s < trace.length; ++s) {
            const auto p = static_cast<std::size_t>(b * trace.length + s);
            auto tokens = nlohmann::json::array();
            if (ctx.discrete()) {
                for (std::int64_t t = 0; t <= s; ++t) tokens.push_back(ctx.tokens[static_cast<std::size_t>(b * ctx.length + t)]);
            }
            auto energies = nlohmann::json::array();
            for (const auto& c : trace.candidates) {
                auto steps = nlohmann::json::array();
                for (const auto& e : c.energies) steps.push_back(e.data()[p]);
                energies.push_back(std::move(steps));
            }
            positions.push_back({{"tokens", std::move(tokens)}, {"energies", std::move(energies)}, {"chosen", trace.chosen[p]}});
        }
        rows.push_back({{"context_id", first_context_id + b}, {"positions", std::move(positions)}, {"nfe", trace.nfe}});
    }
    return rows;
}

void validate_trace_json(const nlohmann::json& doc) {
    const auto fail = [](const std::string& why) { throw ContractViolation("invalid trace: " + why); };
    if (!doc.is_array()) fail("top level must be an array");
    for (const auto& row : doc) {
        if (!row.is_object()) fail("row must be an object");
        if (!row.contains("context_id") || !row["context_id"].is_number_integer()) fail("missing context_id");
        if (!row.contains("nfe") || !row["nfe"].is_number_integer() || row["nfe"].get<std::int64_t>() < 0) fail("missing nfe");
        if (!row.contains("positions") || !row["positions"].is_array()) fail("missing positions");
        for (const auto& pos : row["positions"]) {
            if (!pos.contains("tokens") || !pos["tokens"].is_array()) fail("position without tokens");
            for (const auto& t : pos["tokens"])
                if (!t.is_number_integer()) fail("token ids must be integers");
            if (!pos.contains("energies") || !pos["energies"].is_array() || pos["energies"].empty()) fail("position without energies");
            for (const auto& cand : pos["energies"]) {
                if (!cand.is_array() || cand.empty()) fail("energies must be non-empty arrays per candidate");
                for (const auto& e : cand)
                    if (!e.is_number()) fail("energy must be a number");
            }
            if (!pos.contains("chosen") || !pos["chosen"].is_number_integer()) fail("position without chosen");
            const auto chosen = pos["chosen"].get<std::int64_t>();
            if (chosen < 0 || chosen >= static_cast<std::int64_t>(pos["energies"].size())) fail("chosen out of range");
        }
    }
}

}  // namespace ebt::thinking
