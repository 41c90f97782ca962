#pragma once

#include <cstdint>
#include <vector>

#include "ebt/autodiff/tensor.hpp"

namespace ebt::nn {

struct AttentionConfig {
    std::int64_t heads = 1;
    std::int64_t head_dim = 1;
    double rotary_base = 10000.0;
    bool causal = true;
    bool use_rotary = true;

    std::int64_t model_dim() const { return heads * head_dim; }
};

/// Projection weights, each [D, D], applied as x @ W.
struct AttentionWeights {
    Tensor wq, wk, wv, wo;
};

/// Observed states z_o [B, So, D] and predictions z_p [B, S, D].
///
/// So = S + prefix, where the prefix holds slots that precede the first
/// observed token (the step embedding) and are visible to every position.
/// Prediction t is the candidate for the element after observed slot t+prefix.
struct SequencePair {
    Tensor observed;
    Tensor predicted;

    std::int64_t batch() const { return predicted.dim(0); }
    std::int64_t length() const { return predicted.dim(1); }
    std::int64_t prefix() const { return observed.dim(1) - predicted.dim(1); }
    void validate() const;
};

/// Applies rotary position encoding to x [B, H, T, dk] with one position per T.
Tensor rotary_encode(const Tensor& x, const std::vector<std::int64_t>& positions, double base);

Tensor split_heads(const Tensor& x, std::int64_t heads);  // [B,T,D] -> [B,H,T,dk]
Tensor merge_heads(const Tensor& x);                      // [B,H,T,dk] -> [B,T,D]

/// Plain causal self-attention, positions 0..S-1.
Tensor standard_causal_attention(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg);

/// All-to-all attention. Empty `positions` means 0..S-1.
Tensor bidirectional_attention(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                               const std::vector<std::int64_t>& positions = {});

/// Causal EBT attention built from the observed-score matrix with each
/// prediction's self score written onto the superdiagonal. Observed outputs are
/// ordinary causal attention and never read predictions.
SequencePair ebt_causal_attention_efficient(const SequencePair& pair, const AttentionWeights& observed_w,
                                            const AttentionWeights& predicted_w, const AttentionConfig& cfg);
inline SequencePair ebt_causal_attention_efficient(const SequencePair& pair, const AttentionWeights& w,
                                                   const AttentionConfig& cfg) {
    return ebt_causal_attention_efficient(pair, w, w, cfg);
}

/// Reference version: full (So+S) x (So+S) attention under a generalized causal
/// mask. Roughly twice the FLOPs of the efficient path.
SequencePair ebt_causal_attention_simplified(const SequencePair& pair, const AttentionWeights& observed_w,
                                             const AttentionWeights& predicted_w, const AttentionConfig& cfg);
inline SequencePair ebt_causal_attention_simplified(const SequencePair& pair, const AttentionWeights& w,
                                                    const AttentionConfig& cfg) {
    return ebt_causal_attention_simplified(pair, w, w, cfg);
}

/// 0/1 masks, cached per size. 1 marks a blocked entry unless noted.
namespace masks {
/// [T, T], blocks j > i.
Tensor causal(std::int64_t t);
/// [S, So+1] marker for prediction t's self-score column (t + prefix + 1); 1 = superdiagonal.
Tensor superdiagonal(std::int64_t s, std::int64_t prefix);
/// [S, So+1], blocks columns beyond each prediction's superdiagonal entry.
Tensor prediction_causal(std::int64_t s, std::int64_t prefix);
/// [So+S, So+S] generalized causal mask for the simplified path.
Tensor generalized_causal(std::int64_t s, std::int64_t prefix);
}  // namespace masks

std::vector<std::int64_t> observed_positions(std::int64_t observed_len);
std::vector<std::int64_t> predicted_positions(std::int64_t len, std::int64_t prefix);

}  // namespace ebt::nn
