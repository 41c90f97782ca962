#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ebt/model/model.hpp"
#include "ebt/tasks/corpus.hpp"
#include "ebt/util/ini.hpp"

namespace ebt::train {

enum class LossKind { CrossEntropy, SmoothL1, MeanSquared };

std::string to_string(LossKind kind);

struct TrainConfig {
    double learning_rate = 1e-3;
    std::int64_t warmup_steps = 10000;
    std::int64_t total_steps = 100000;
    std::int64_t batch_size = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    LossKind loss = LossKind::CrossEntropy;
    double smooth_l1_beta = 1.0;
    std::int64_t replay_capacity = 1024;
    double replay_sample_probability = 0.05;
    bool allow_zero_steps = false;

    void validate() const;
    void write(ini::Section& section) const;
    static TrainConfig read(const ini::Section& section);
};

/// Linear warmup to the base rate, then cosine decay to a tenth of it.
double lr_at(std::int64_t step, const TrainConfig& cfg);

/// Realized inner-loop settings for one training step.
struct OptimizationSchedule {
    std::int64_t n_real = 0;
    /// Per-(batch, position) multipliers u; α_eff = α · u.
    Tensor alpha_scale;
    double sigma = 0.0;
    bool detach = true;
    bool truncate = false;
    std::optional<double> grad_clamp;

    /// α_eff [B, S]; differentiable wrt a learnable α.
    Tensor alpha_eff(const Tensor& alpha) const;
};

OptimizationSchedule draw_schedule(const EBTConfig& cfg, std::int64_t batch, std::int64_t length, Rng& rng);

/// Energy of a prediction at an inner step, [B, S].
using StepEnergyFn = std::function<Tensor(const Tensor& prediction, std::int64_t step)>;
using LossFn = std::function<Tensor(const Tensor& prediction)>;

struct UnrollResult {
    Tensor prediction;                // ŷ_N
    Tensor loss;                      // scalar, differentiable
    std::vector<Tensor> energies;     // E(ŷ_i) for i < N
    std::vector<Tensor> step_losses;  // J(ŷ_i) for i >= 1 when every step is scored
};

/// Runs the schedule's inner optimization from y0 with gradients kept for the
/// outer update, scoring the final step only (truncate) or the mean over steps.
UnrollResult unroll(const StepEnergyFn& energy, const Tensor& y0, const Tensor& alpha_eff,
                    const OptimizationSchedule& schedule, const LossFn& loss, Rng* rng);

/// One training example set. `context` and the matching target form are
/// required; `initial` optionally replaces the noise start.
struct TrainBatch {
    Context context;
    std::vector<std::int64_t> targets;  // discrete: B*S ids
    Tensor target_features;             // continuous: [B, S, F]
    Tensor initial;                     // optional [B, S, K]
    std::vector<std::int64_t> ids;      // per-row identifiers for replay
    std::vector<double> weights;        // optional per-target weights for the task metric

    std::int64_t batch() const { return context.batch; }
    std::int64_t length() const { return context.length; }
    TrainBatch row(std::int64_t i) const;
    /// Concatenates single-row batches.
    static TrainBatch stack(const std::vector<TrainBatch>& rows);
};

/// Next-symbol batch as training input; row ids come from `first_id` onward.
TrainBatch token_batch(const tasks::TokenBatch& tokens, std::int64_t first_id = 0);

struct ReplayEntry {
    std::int64_t context_id = 0;
    TrainBatch example;  // one row
    Tensor prediction;   // [1, S, K], detached
    std::int64_t steps_taken = 0;
};

/// Fixed-capacity FIFO of optimized predictions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::int64_t capacity = 1024, double sample_probability = 0.05);

    void push(ReplayEntry entry);
    /// A stored entry with probability sample_probability, otherwise nothing
    /// (start from fresh noise). Always nothing when empty.
    std::optional<ReplayEntry> sample(Rng& rng) const;

    std::int64_t size() const { return static_cast<std::int64_t>(entries_.size()); }
    std::int64_t capacity() const { return capacity_; }
    double sample_probability() const { return probability_; }
    const std::deque<ReplayEntry>& entries() const { return entries_; }

private:
    std::int64_t capacity_;
    double probability_;
    std::deque<ReplayEntry> entries_;
};

/// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<Parameter> params, const TrainConfig& cfg);
    /// Applies one update with base rate `lr` (scaled per parameter).
    void step(const std::vector<Tensor>& grads, double lr);
    const std::vector<Parameter>& params() const { return params_; }
    std::int64_t steps() const { return t_; }

private:
    std::vector<Parameter> params_;
    TrainConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);
double global_norm(const std::vector<Tensor>& grads);

struct RunRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;  // before clipping
    double e_init_mean = 0.0;
    double e_final_mean = 0.0;
    std::int64_t n_real = 0;
    std::int64_t nfe_cum = 0;
    double flops_cum = 0.0;
    // Not part of the CSV.
    double clipped_grad_norm = 0.0;
    double alpha = 0.0;
    double mean_trajectory = 0.0;  // fresh plus resumed steps per row
    std::int64_t replayed_rows = 0;
    double replayed_trajectory = 0.0;  // same, over replayed rows only
    std::vector<double> step_losses;  // per inner step when loss is taken at every step

    double energy_gap() const { return e_init_mean - e_final_mean; }
};

/// Loss J between a prediction and the batch targets (mean over positions).
Tensor task_loss(const TrainConfig& cfg, const Tensor& prediction, const TrainBatch& batch);

/// Per-step metrics CSV with a fixed column set.
class MetricsCsv {
public:
    static constexpr const char* kHeader = "step,loss,lr,grad_norm,e_init_mean,e_final_mean,n_real,nfe_cum,flops_cum";
    explicit MetricsCsv(std::ostream& out);
    void append(const RunRecord& r);
    static std::string row(const RunRecord& r);

private:
    std::ostream& out_;
};

/// Unrolled inner optimization plus the outer update.
class Trainer {
public:
    Trainer(EbtModel& model, TrainConfig cfg, std::uint64_t seed);

    /// Draws a schedule then trains on the batch.
    RunRecord step(const TrainBatch& batch);
    RunRecord step(const TrainBatch& batch, const OptimizationSchedule& schedule);

    /// Loss J between a prediction and the batch targets (mean over positions).
    Tensor task_loss(const Tensor& prediction, const TrainBatch& batch) const;

    const ReplayBuffer& replay() const { return replay_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t steps_done() const { return step_; }
    Rng& rng() { return rng_; }

private:
    EbtModel& model_;
    TrainConfig cfg_;
    Rng rng_;
    AdamW optimizer_;
    ReplayBuffer replay_;
    std::int64_t step_ = 0;
    std::int64_t nfe_cum_ = 0;
    double flops_cum_ = 0.0;
};

}  // namespace ebt::train
