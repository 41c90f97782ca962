#include "ebt/nn/attention.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <tuple>

#include "ebt/autodiff/ops.hpp"

namespace ebt::nn {
namespace o = ebt::ops;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Projected {
    Tensor q, k, v;
};

Projected project(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                  const std::vector<std::int64_t>& positions) {
    Projected p{split_heads(o::matmul(x, w.wq), cfg.heads), split_heads(o::matmul(x, w.wk), cfg.heads),
                split_heads(o::matmul(x, w.wv), cfg.heads)};
    if (cfg.use_rotary) {
        p.q = rotary_encode(p.q, positions, cfg.rotary_base);
        p.k = rotary_encode(p.k, positions, cfg.rotary_base);
    }
    return p;
}

void check_input(const Tensor& x, const AttentionConfig& cfg) {
    EBT_REQUIRE(x.rank() == 3, "attention expects [batch, S, D], got " + shape_str(x.shape()));
    EBT_REQUIRE(x.dim(1) >= 1, "attention needs S >= 1");
    EBT_REQUIRE(x.dim(2) == cfg.model_dim(), "embedding dim " + std::to_string(x.dim(2)) +
                                                 " != heads * head_dim = " + std::to_string(cfg.model_dim()));
}

std::vector<std::int64_t> iota_positions(std::int64_t n, std::int64_t start = 0) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) p[i] = start + i;
    return p;
}

template <class Build>
Tensor cached_mask(const std::tuple<int, std::int64_t, std::int64_t>& key, Build build) {
    static std::mutex mu;
    static std::map<std::tuple<int, std::int64_t, std::int64_t>, Tensor> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    NoGradGuard no_grad;
    Tensor m = build();
    cache.emplace(key, m);
    return m;
}

}  // namespace

void SequencePair::validate() const {
    EBT_REQUIRE(observed.defined() && predicted.defined(), "sequence pair has an undefined stream");
    EBT_REQUIRE(observed.rank() == 3 && predicted.rank() == 3,
                "sequence pair streams must be [batch, S, D]: " + shape_str(observed.shape()) + " / " +
                    shape_str(predicted.shape()));
    EBT_REQUIRE(observed.dim(0) == predicted.dim(0) && observed.dim(2) == predicted.dim(2),
                "sequence pair batch/width mismatch: " + shape_str(observed.shape()) + " vs " +
                    shape_str(predicted.shape()));
    EBT_REQUIRE(predicted.dim(1) >= 1 && observed.dim(1) >= predicted.dim(1),
                "observed stream shorter than predictions: " + shape_str(observed.shape()) + " vs " +
                    shape_str(predicted.shape()));
}

Tensor rotary_encode(const Tensor& x, const std::vector<std::int64_t>& positions, double base) {
    EBT_REQUIRE(x.rank() == 4, "rotary expects [B, H, T, dk]");
    const std::int64_t t = x.dim(2), dk = x.dim(3);
    EBT_REQUIRE(dk % 2 == 0, "rotary needs an even head dimension");
    EBT_REQUIRE(static_cast<std::int64_t>(positions.size()) == t, "rotary position count mismatch");
    const std::int64_t half = dk / 2;
    std::vector<double> cs(static_cast<std::size_t>(t * half)), sn(cs.size());
    for (std::int64_t i = 0; i < t; ++i) {
        for (std::int64_t j = 0; j < half; ++j) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dk));
            const double angle = static_cast<double>(positions[i]) * freq;
            cs[i * half + j] = std::cos(angle);
            sn[i * half + j] = std::sin(angle);
        }
    }
    const auto cos_t = Tensor::from_data({t, half}, std::move(cs));
    const auto sin_t = Tensor::from_data({t, half}, std::move(sn));
    const auto x1 = o::slice(x, 3, 0, half);
    const auto x2 = o::slice(x, 3, half, dk);
    return o::concat({o::sub(o::mul(x1, cos_t), o::mul(x2, sin_t)), o::add(o::mul(x2, cos_t), o::mul(x1, sin_t))},
                     3);
}

Tensor split_heads(const Tensor& x, std::int64_t heads) {
    const std::int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    EBT_REQUIRE(d % heads == 0, "width " + std::to_string(d) + " not divisible by heads");
    return o::permute(o::reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
    const std::int64_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dk = x.dim(3);
    return o::reshape(o::permute(x, {0, 2, 1, 3}), {b, t, h * dk});
}

std::vector<std::int64_t> observed_positions(std::int64_t observed_len) { return iota_positions(observed_len); }

std::vector<std::int64_t> predicted_positions(std::int64_t len, std::int64_t prefix) {
    return iota_positions(len, prefix + 1);
}

namespace masks {

Tensor causal(std::int64_t t) {
    return cached_mask({0, t, 0}, [t] {
        std::vector<double> m(static_cast<std::size_t>(t * t), 0.0);
        for (std::int64_t i = 0; i < t; ++i)
            for (std::int64_t j = i + 1; j < t; ++j) m[i * t + j] = 1.0;
        return Tensor::from_data({t, t}, std::move(m));
    });
}

Tensor superdiagonal(std::int64_t s, std::int64_t prefix) {
    return cached_mask({1, s, prefix}, [s, prefix] {
        const std::int64_t cols = s + prefix + 1;
        std::vector<double> m(static_cast<std::size_t>(s * cols), 0.0);
        for (std::int64_t t = 0; t < s; ++t) m[t * cols + t + prefix + 1] = 1.0;
        return Tensor::from_data({s, cols}, std::move(m));
    });
}

Tensor prediction_causal(std::int64_t s, std::int64_t prefix) {
    return cached_mask({2, s, prefix}, [s, prefix] {
        const std::int64_t cols = s + prefix + 1;
        std::vector<double> m(static_cast<std::size_t>(s * cols), 0.0);
        for (std::int64_t t = 0; t < s; ++t)
            for (std::int64_t j = t + prefix + 2; j < cols; ++j) m[t * cols + j] = 1.0;
        return Tensor::from_data({s, cols}, std::move(m));
    });
}

Tensor generalized_causal(std::int64_t s, std::int64_t prefix) {
    return cached_mask({3, s, prefix}, [s, prefix] {
        const std::int64_t so = s + prefix;
        const std::int64_t n = so + s;
        std::vector<double> m(static_cast<std::size_t>(n * n), 1.0);
        for (std::int64_t i = 0; i < so; ++i)
            for (std::int64_t j = 0; j <= i; ++j) m[i * n + j] = 0.0;
        for (std::int64_t t = 0; t < s; ++t) {
            const std::int64_t row = so + t;
            for (std::int64_t j = 0; j <= t + prefix; ++j) m[row * n + j] = 0.0;
            m[row * n + row] = 0.0;
        }
        return Tensor::from_data({n, n}, std::move(m));
    });
}

}  // namespace masks

Tensor standard_causal_attention(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg) {
    check_input(x, cfg);
    const std::int64_t t = x.dim(1);
    const auto p = project(x, w, cfg, iota_positions(t));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    auto scores = o::mul_scalar(o::matmul(p.q, o::transpose(p.k)), scale);
    scores = o::masked_fill(scores, masks::causal(t), kNegInf);
    return o::matmul(merge_heads(o::matmul(o::softmax(scores), p.v)), w.wo);
}

Tensor bidirectional_attention(const Tensor& x, const AttentionWeights& w, const AttentionConfig& cfg,
                               const std::vector<std::int64_t>& positions) {
    check_input(x, cfg);
    const std::int64_t t = x.dim(1);
    const auto pos = positions.empty() ? iota_positions(t) : positions;
    EBT_REQUIRE(static_cast<std::int64_t>(pos.size()) == t, "position count mismatch");
    const auto p = project(x, w, cfg, pos);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    const auto scores = o::mul_scalar(o::matmul(p.q, o::transpose(p.k)), scale);
    return o::matmul(merge_heads(o::matmul(o::softmax(scores), p.v)), w.wo);
}

SequencePair ebt_causal_attention_efficient(const SequencePair& pair, const AttentionWeights& observed_w,
                                            const AttentionWeights& predicted_w, const AttentionConfig& cfg) {
    pair.validate();
    check_input(pair.observed, cfg);
    check_input(pair.predicted, cfg);
    const std::int64_t s = pair.length();
    const std::int64_t prefix = pair.prefix();
    const std::int64_t so = s + prefix;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

    const auto obs = project(pair.observed, observed_w, cfg, observed_positions(so));
    const auto pred = project(pair.predicted, predicted_w, cfg, predicted_positions(s, prefix));

    // Observed rows: ordinary causal attention.
    auto obs_scores = o::mul_scalar(o::matmul(obs.q, o::transpose(obs.k)), scale);
    obs_scores = o::masked_fill(obs_scores, masks::causal(so), kNegInf);
    const auto obs_out = o::matmul(merge_heads(o::matmul(o::softmax(obs_scores), obs.v)), observed_w.wo);

    // Prediction rows: scores against observed keys, one extra column, and the
    // self score written onto the superdiagonal.
    const auto diag = masks::superdiagonal(s, prefix);
    const auto off_diag = o::add_scalar(o::neg(diag), 1.0);
    auto scores = o::mul_scalar(o::matmul(pred.q, o::transpose(obs.k)), scale);
    scores = o::pad_into(scores, 3, 0, so + 1);
    const auto self_scores = o::mul_scalar(o::sum(o::mul(pred.q, pred.k), 3, true), scale);
    scores = o::add(o::mul(scores, off_diag), o::mul(self_scores, diag));
    scores = o::masked_fill(scores, masks::prediction_causal(s, prefix), kNegInf);
    const auto probs = o::softmax(scores);

    const auto self_weight = o::sum(o::mul(probs, diag), 3, true);
    const auto context_weights = o::slice(o::mul(probs, off_diag), 3, 0, so);
    const auto mixed = o::add(o::matmul(context_weights, obs.v), o::mul(self_weight, pred.v));
    const auto pred_out = o::matmul(merge_heads(mixed), predicted_w.wo);
    return {obs_out, pred_out};
}

SequencePair ebt_causal_attention_simplified(const SequencePair& pair, const AttentionWeights& observed_w,
                                             const AttentionWeights& predicted_w, const AttentionConfig& cfg) {
    pair.validate();
    check_input(pair.observed, cfg);
    check_input(pair.predicted, cfg);
    const std::int64_t s = pair.length();
    const std::int64_t prefix = pair.prefix();
    const std::int64_t so = s + prefix;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

    const auto obs = project(pair.observed, observed_w, cfg, observed_positions(so));
    const auto pred = project(pair.predicted, predicted_w, cfg, predicted_positions(s, prefix));
    const auto q = o::concat({obs.q, pred.q}, 2);
    const auto k = o::concat({obs.k, pred.k}, 2);
    const auto v = o::concat({obs.v, pred.v}, 2);

    auto scores = o::mul_scalar(o::matmul(q, o::transpose(k)), scale);
    scores = o::masked_fill(scores, masks::generalized_causal(s, prefix), kNegInf);
    const auto mixed = o::matmul(o::softmax(scores), v);
    const auto obs_out = o::matmul(merge_heads(o::slice(mixed, 2, 0, so)), observed_w.wo);
    const auto pred_out = o::matmul(merge_heads(o::slice(mixed, 2, so, so + s)), predicted_w.wo);
    return {obs_out, pred_out};
}

}  // namespace ebt::nn
