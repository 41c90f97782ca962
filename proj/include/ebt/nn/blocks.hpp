#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ebt/autodiff/grad.hpp"
#include "ebt/nn/attention.hpp"

namespace ebt::nn {

/// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor rms_normalize(const Tensor& x, const Tensor& gain, double eps = 1e-6);

/// SwiGLU: (silu(x W1) * (x W3)) W2.
Tensor gated_mlp(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2);

/// Xavier-uniform [fan_in, fan_out] matrix.
Tensor xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, Rng& rng);

struct BlockWeights {
    Tensor attn_norm;
    AttentionWeights attn;
    Tensor mlp_norm;
    Tensor w1, w3, w2;
    // Only populated when predictions use their own Q/K/V/O projections.
    AttentionWeights pred_attn;

    static BlockWeights init(std::int64_t dim, std::int64_t ffn_dim, bool separate_pred_attn, Rng& rng);
    /// Visits (suffix, slot) for every parameter in a stable order.
    template <class F>
    void visit(F&& f) {
        f("attn_norm", attn_norm);
        f("wq", attn.wq);
        f("wk", attn.wk);
        f("wv", attn.wv);
        f("wo", attn.wo);
        f("mlp_norm", mlp_norm);
        f("w1", w1);
        f("w3", w3);
        f("w2", w2);
        if (pred_attn.wq.defined()) {
            f("pred_wq", pred_attn.wq);
            f("pred_wk", pred_attn.wk);
            f("pred_wv", pred_attn.wv);
            f("pred_wo", pred_attn.wo);
        }
    }
    const AttentionWeights& predicted_attention() const { return pred_attn.wq.defined() ? pred_attn : attn; }
};

enum class AttentionKind { Efficient, Simplified };

/// Pre-norm transformer block on an observed/predicted pair, shared weights.
SequencePair block_forward(const SequencePair& pair, const BlockWeights& w, const AttentionConfig& cfg,
                           AttentionKind kind = AttentionKind::Efficient);

/// Pre-norm block over a single sequence; causal or bidirectional per cfg.
Tensor block_forward(const Tensor& x, const BlockWeights& w, const AttentionConfig& cfg,
                     const std::vector<std::int64_t>& positions = {});

/// [B, 1, D] row `step_index` of `table` ([max_steps, D]) for every batch item.
Tensor step_embedding(const Tensor& table, std::int64_t step_index, std::int64_t batch);

}  // namespace ebt::nn
