#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ebt/model/model.hpp"
#include "ebt/train/trainer.hpp"

namespace ebt::harness {

/// Conventional transformer with the same blocks as the EBT: one forward pass
/// maps the context straight to next-element logits (or features). Reads the
/// size, modality and architecture fields of EBTConfig and ignores the rest.
class FeedForwardModel {
public:
    FeedForwardModel(EBTConfig cfg, std::uint64_t seed);
    FeedForwardModel(const FeedForwardModel&) = delete;
    FeedForwardModel& operator=(const FeedForwardModel&) = delete;

    const EBTConfig& config() const { return cfg_; }

    /// [B, S, V] logits or [B, S, F] features. Increments the forward counter.
    Tensor forward(const Context& ctx) const;

    std::vector<Parameter> parameters();
    std::int64_t parameter_count();
    std::int64_t nonembedding_parameter_count();
    /// Closed-form parameter counts for a config.
    static std::int64_t expected_parameter_count(const EBTConfig& cfg);
    static std::int64_t expected_nonembedding_parameter_count(const EBTConfig& cfg);

    std::int64_t forward_count() const { return forwards_.load(); }
    void reset_forward_count() { forwards_.store(0); }

    void save(const std::string& path);
    static std::unique_ptr<FeedForwardModel> load(const std::string& path);

private:
    EBTConfig cfg_;
    nn::AttentionConfig attn_;
    Tensor token_embed_;  // [V, D] discrete
    Tensor input_proj_;   // [F, D] continuous
    std::vector<nn::BlockWeights> blocks_;
    Tensor final_norm_;
    Tensor output_head_;  // [D, V] or [D, F]; absent when tied to token_embed
    mutable std::atomic<std::int64_t> forwards_{0};
};

/// Plain next-element training for the baseline. CSV columns match the EBT
/// trainer; energies stay zero and every step costs one forward pass.
class FeedForwardTrainer {
public:
    FeedForwardTrainer(FeedForwardModel& model, train::TrainConfig cfg);
    train::RunRecord step(const train::TrainBatch& batch);
    std::int64_t steps_done() const { return step_; }

private:
    FeedForwardModel& model_;
    train::TrainConfig cfg_;
    train::AdamW optimizer_;
    std::int64_t step_ = 0;
    std::int64_t nfe_cum_ = 0;
    double flops_cum_ = 0.0;
};

}  // namespace ebt::harness
