#include "ebt/nn/blocks.hpp"

#include <cmath>

#include "ebt/autodiff/ops.hpp"

namespace ebt::nn {
namespace o = ebt::ops;

Tensor rms_normalize(const Tensor& x, const Tensor& gain, double eps) {
    const auto ms = o::mean(o::square(x), -1, true);
    return o::mul(o::div(x, o::sqrt(o::add_scalar(ms, eps))), gain);
}

Tensor gated_mlp(const Tensor& x, const Tensor& w1, const Tensor& w3, const Tensor& w2) {
    return o::matmul(o::mul(o::silu(o::matmul(x, w1)), o::matmul(x, w3)), w2);
}

Tensor xavier_uniform(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(static_cast<std::size_t>(fan_in * fan_out));
    for (auto& e : v) e = rng.uniform(-limit, limit);
    return Tensor::from_data({fan_in, fan_out}, std::move(v), true);
}

BlockWeights BlockWeights::init(std::int64_t dim, std::int64_t ffn_dim, bool separate_pred_attn, Rng& rng) {
    BlockWeights w;
    w.attn_norm = Tensor::ones({dim}).detach_requires_grad();
    w.attn = {xavier_uniform(dim, dim, rng), xavier_uniform(dim, dim, rng), xavier_uniform(dim, dim, rng),
              xavier_uniform(dim, dim, rng)};
    w.mlp_norm = Tensor::ones({dim}).detach_requires_grad();
    w.w1 = xavier_uniform(dim, ffn_dim, rng);
    w.w3 = xavier_uniform(dim, ffn_dim, rng);
    w.w2 = xavier_uniform(ffn_dim, dim, rng);
    if (separate_pred_attn) {
        w.pred_attn = {xavier_uniform(dim, dim, rng), xavier_uniform(dim, dim, rng), xavier_uniform(dim, dim, rng),
                       xavier_uniform(dim, dim, rng)};
    }
    return w;
}

SequencePair block_forward(const SequencePair& pair, const BlockWeights& w, const AttentionConfig& cfg,
                           AttentionKind kind) {
    const SequencePair normed{rms_normalize(pair.observed, w.attn_norm), rms_normalize(pair.predicted, w.attn_norm)};
    const auto attended = kind == AttentionKind::Efficient
                              ? ebt_causal_attention_efficient(normed, w.attn, w.predicted_attention(), cfg)
                              : ebt_causal_attention_simplified(normed, w.attn, w.predicted_attention(), cfg);
    const auto zo = o::add(pair.observed, attended.observed);
    const auto zp = o::add(pair.predicted, attended.predicted);
    return {o::add(zo, gated_mlp(rms_normalize(zo, w.mlp_norm), w.w1, w.w3, w.w2)),
            o::add(zp, gated_mlp(rms_normalize(zp, w.mlp_norm), w.w1, w.w3, w.w2))};
}

Tensor block_forward(const Tensor& x, const BlockWeights& w, const AttentionConfig& cfg,
                     const std::vector<std::int64_t>& positions) {
    const auto normed = rms_normalize(x, w.attn_norm);
    const auto attended = cfg.causal ? standard_causal_attention(normed, w.attn, cfg)
                                     : bidirectional_attention(normed, w.attn, cfg, positions);
    const auto h = o::add(x, attended);
    return o::add(h, gated_mlp(rms_normalize(h, w.mlp_norm), w.w1, w.w3, w.w2));
}

Tensor step_embedding(const Tensor& table, std::int64_t step_index, std::int64_t batch) {
    EBT_REQUIRE(table.rank() == 2, "step table must be [max_steps, D]");
    EBT_REQUIRE(step_index >= 0 && step_index < table.dim(0),
                "step index " + std::to_string(step_index) + " outside [0, " + std::to_string(table.dim(0)) + ")");
    const auto row = o::take_rows(table, {step_index}, {1});
    return o::broadcast_to(o::reshape(row, {1, 1, table.dim(1)}), {batch, 1, table.dim(1)});
}

}  // namespace ebt::nn
