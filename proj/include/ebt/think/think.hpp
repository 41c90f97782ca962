#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ebt/model/model.hpp"

namespace ebt::thinking {

/// Energy [B, S] of a prediction at inner step `step`.
using StepEnergy = std::function<Tensor(const Tensor& prediction, std::int64_t step)>;

struct ThinkOptions {
    std::int64_t steps = 2;
    std::optional<double> alpha;  // defaults to the model's base step size
    double sigma = 0.0;           // Langevin noise on every step but the last
    /// Draw α_eff = α·u with u ~ U[1/r, r] per position, once per trajectory.
    bool randomize_alpha = false;
    double alpha_random_factor = 1.0;
    std::optional<double> grad_clamp;
    /// Stop once max |E_i − E_{i−1}| over positions falls below this.
    std::optional<double> early_stop_tol;
    Tensor initial;  // optional start [B, S, K]; fresh noise otherwise
    std::uint64_t seed = 0;
    bool parallel = false;  // candidates on separate threads
};

inline constexpr double kDefaultEarlyStopTol = 1e-4;

struct CandidateTrace {
    /// energies[i] = E(ŷ_i) as [B, S], for i = 0 .. steps_taken.
    std::vector<Tensor> energies;
    std::int64_t steps_taken = 0;

    const Tensor& final_energy() const { return energies.back(); }
};

struct EnergyTrace {
    std::int64_t batch = 0;
    std::int64_t length = 0;
    std::vector<CandidateTrace> candidates;
    std::vector<std::int64_t> chosen;  // [B*S] winning candidate per position
    /// Optimization forward passes (one per step per candidate).
    std::int64_t nfe = 0;
    /// Extra forwards that score the final predictions.
    std::int64_t verification_passes = 0;

    std::int64_t chosen_at(std::int64_t b, std::int64_t s) const { return chosen[static_cast<std::size_t>(b * length + s)]; }
    /// Energy of the returned prediction, [B, S].
    Tensor final_energy() const;
};

struct ThinkResult {
    Tensor prediction;
    EnergyTrace trace;
};

ThinkResult think(const StepEnergy& energy, const Shape& prediction_shape, double alpha, const ThinkOptions& opts);
ThinkResult think(const EbtModel& model, const Context& ctx, const ThinkOptions& opts);

/// Best-of-M: per position, the candidate with the lowest final energy.
/// Candidate j draws everything from derive_seed(opts.seed, j).
ThinkResult self_verify(const StepEnergy& energy, const Shape& prediction_shape, double alpha,
                        const ThinkOptions& opts, std::int64_t candidates);
ThinkResult self_verify(const EbtModel& model, const Context& ctx, const ThinkOptions& opts,
                        std::int64_t candidates);

struct SttReport {
    double baseline_metric = 0.0;
    double metric_at_f = 0.0;
    double stt = 0.0;
};

/// Relative improvement P(F)/P(F0) − 1. For losses the ratio is inverted,
/// P(F0)/P(F) − 1, so a positive value still means improvement.
SttReport stt(double metric_at_f0, double metric_at_f, bool higher_is_better);

std::int64_t count_nfe(const EnergyTrace& trace);

/// {context_id, positions: [{tokens, energies: [[per step] per candidate], chosen}], nfe}
/// per batch row. `tokens` holds the context ids visible at that position.
nlohmann::json trace_to_json(const EnergyTrace& trace, const Context& ctx, std::int64_t first_context_id = 0);
/// Throws ContractViolation when `doc` does not follow the layout above.
void validate_trace_json(const nlohmann::json& doc);

}  // namespace ebt::thinking
