#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebt/autodiff/grad.hpp"
#include "ebt/model/config.hpp"
#include "ebt/nn/blocks.hpp"

namespace ebt {

/// What the energy is conditioned on. Discrete models take token ids [B, S];
/// continuous models take features [B, S, F].
struct Context {
    std::vector<std::int64_t> tokens;
    Tensor features;
    std::int64_t batch = 0;
    std::int64_t length = 0;

    static Context from_tokens(std::vector<std::int64_t> ids, std::int64_t batch, std::int64_t length);
    static Context from_features(const Tensor& features);
    bool discrete() const { return !features.defined(); }
    /// Rows `[begin, end)` of the batch.
    Context rows(std::int64_t begin, std::int64_t end) const;
};

/// A named trainable tensor and how the optimizer should treat it.
struct Parameter {
    std::string name;
    Tensor* slot;
    bool decay;
    double lr_scale;
    bool embedding;  // excluded from the non-embedding count
};

/// Standard-normal ŷ0 of shape [batch, length, dims].
Tensor init_prediction(std::int64_t batch, std::int64_t length, std::int64_t dims, std::uint64_t seed);
Tensor init_prediction(std::int64_t batch, std::int64_t length, std::int64_t dims, Rng& rng);

/// Per-position energies [B, S] for a prediction [B, S, K].
using EnergyFn = std::function<Tensor(const Tensor& prediction)>;

struct ThinkStepOptions {
    double sigma = 0.0;
    std::optional<double> grad_clamp;
    bool detach = true;
    /// Keep the update differentiable wrt parameters (training).
    bool create_graph = false;
    std::int64_t step = 0;  // reported in instability errors
    Rng* rng = nullptr;     // required when sigma > 0
};

struct ThinkStepResult {
    Tensor prediction;  // ŷ_{i+1}
    Tensor energy;      // E(ŷ_i), [B, S]
};

/// One step ŷ ← ŷ − α_eff ⊙ ∇E(ŷ) + η with η ~ N(0, σ²).
/// `alpha_eff` is [B, S] and may carry gradient (learned step size).
ThinkStepResult think_step(const EnergyFn& energy, const Tensor& prediction, const Tensor& alpha_eff,
                           const ThinkStepOptions& opts);

class EbtModel {
public:
    EbtModel(EBTConfig cfg, std::uint64_t seed);
    EbtModel(const EbtModel&) = delete;
    EbtModel& operator=(const EbtModel&) = delete;

    const EBTConfig& config() const { return cfg_; }

    /// Per-position energies [B, S]. Increments the forward counter.
    Tensor energy(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const;

    /// softmax output [B, S, V] -> [B, S, D] as a weighted sum of embedding rows.
    Tensor vocab_to_embed(const Tensor& distribution) const;
    Tensor embed_tokens(const std::vector<std::int64_t>& ids, std::int64_t batch, std::int64_t length) const;

    ThinkStepResult think_step(const Context& ctx, const Tensor& prediction, const Tensor& alpha_eff,
                               std::int64_t step_index, const ThinkStepOptions& opts) const;

    /// Base step size as a scalar tensor; a trainable leaf when alpha is learnable.
    const Tensor& alpha() const { return alpha_; }
    double alpha_value() const { return alpha_.item(); }

    std::vector<Parameter> parameters();
    std::int64_t parameter_count();
    std::int64_t nonembedding_parameter_count();

    std::int64_t forward_count() const { return forwards_.load(); }
    void reset_forward_count() { forwards_.store(0); }

    /// Binary checkpoint: text header then little-endian parameter values.
    void save(const std::string& path);
    static std::unique_ptr<EbtModel> load(const std::string& path);

private:
    std::int64_t step_row(std::int64_t step_index) const;
    Tensor energy_causal(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const;
    Tensor energy_bidirectional(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const;
    Tensor distribution_embedding(const Tensor& prediction) const;

    EBTConfig cfg_;
    nn::AttentionConfig attn_;
    Tensor token_embed_;     // [V, D] discrete
    Tensor vocab_embed_;     // [V, D] when embeddings are not tied
    Tensor input_proj_;      // [F, D] continuous
    Tensor pred_proj_;       // [F, D] continuous predictions
    Tensor segment_embed_;   // [2, D] bidirectional: context vs prediction
    Tensor step_table_;      // [K, D]
    std::vector<nn::BlockWeights> blocks_;
    Tensor final_norm_;      // [D]
    Tensor energy_head_;     // [D, 1]
    Tensor alpha_;
    mutable std::atomic<std::int64_t> forwards_{0};
};

}  // namespace ebt
