#include <doctest.h>

#include <cmath>
#include <vector>

#include "ebt/autodiff/grad.hpp"
#include "ebt/autodiff/ops.hpp"
#include "ebt/nn/attention.hpp"
#include "ebt/nn/blocks.hpp"

using namespace ebt;
using namespace ebt::nn;
namespace o = ebt::ops;

namespace {

// ---- brute-force reference: explicit per-row loops over plain arrays -------

using Mat = std::vector<std::vector<double>>;  // [rows][cols]

Mat rows_of(const Tensor& x, std::int64_t b) {  // x: [B, T, D]
    const auto t = x.dim(1), d = x.dim(2);
    Mat m(t, std::vector<double>(d));
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = 0; j < d; ++j) m[i][j] = x.at({b, i, j});
    return m;
}

std::vector<double> vecmat(const std::vector<double>& v, const Tensor& w) {
    const auto in = w.dim(0), out = w.dim(1);
    std::vector<double> r(out, 0.0);
    for (std::int64_t i = 0; i < in; ++i)
        for (std::int64_t j = 0; j < out; ++j) r[j] += v[i] * w.at({i, j});
    return r;
}

// Rotary on one head slice (half-split pairing).
std::vector<double> rotate(std::vector<double> h, std::int64_t pos, double base) {
    const auto dk = static_cast<std::int64_t>(h.size());
    const auto half = dk / 2;
    std::vector<double> r(h.size());
    for (std::int64_t j = 0; j < half; ++j) {
        const double a = static_cast<double>(pos) * std::pow(base, -2.0 * j / static_cast<double>(dk));
        r[j] = h[j] * std::cos(a) - h[j + half] * std::sin(a);
        r[j + half] = h[j + half] * std::cos(a) + h[j] * std::sin(a);
    }
    return r;
}

struct Token {
    std::vector<double> x;
    std::int64_t pos;
    const AttentionWeights* w;
};

// Attention output of `query` over `keys` (each with their own projections).
std::vector<double> attend(const Token& query, const std::vector<Token>& keys, const AttentionConfig& cfg) {
    const auto dk = cfg.head_dim;
    const auto q_all = vecmat(query.x, query.w->wq);
    std::vector<double> mixed(cfg.model_dim(), 0.0);
    for (std::int64_t h = 0; h < cfg.heads; ++h) {
        std::vector<double> qh(q_all.begin() + h * dk, q_all.begin() + (h + 1) * dk);
        if (cfg.use_rotary) qh = rotate(qh, query.pos, cfg.rotary_base);
        std::vector<double> scores;
        std::vector<std::vector<double>> values;
        for (const auto& k : keys) {
            const auto k_all = vecmat(k.x, k.w->wk);
            const auto v_all = vecmat(k.x, k.w->wv);
            std::vector<double> kh(k_all.begin() + h * dk, k_all.begin() + (h + 1) * dk);
            if (cfg.use_rotary) kh = rotate(kh, k.pos, cfg.rotary_base);
            double s = 0.0;
            for (std::int64_t j = 0; j < dk; ++j) s += qh[j] * kh[j];
            scores.push_back(s / std::sqrt(static_cast<double>(dk)));
            values.emplace_back(v_all.begin() + h * dk, v_all.begin() + (h + 1) * dk);
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (auto& s : scores) z += (s = std::exp(s - mx));
        for (std::size_t i = 0; i < scores.size(); ++i)
            for (std::int64_t j = 0; j < dk; ++j) mixed[h * dk + j] += scores[i] / z * values[i][j];
    }
    return vecmat(mixed, query.w->wo);
}

double max_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

AttentionWeights random_weights(std::int64_t d, Rng& rng) {
    return {rng.normal_tensor({d, d}, 0.4), rng.normal_tensor({d, d}, 0.4), rng.normal_tensor({d, d}, 0.4),
            rng.normal_tensor({d, d}, 0.4)};
}

Tensor with_row(const Tensor& x, std::int64_t b, std::int64_t t, double delta) {
    std::vector<double> v(x.data().begin(), x.data().end());
    const auto d = x.dim(2);
    for (std::int64_t j = 0; j < d; ++j) v[(b * x.dim(1) + t) * d + j] += delta * (j + 1);
    return Tensor::from_data(x.shape(), v);
}

}  // namespace

TEST_CASE("standard causal attention matches the loop oracle") {
    Rng rng(1);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    const auto x = rng.normal_tensor({2, 5, 8});
    const auto out = standard_causal_attention(x, w, cfg);
    for (std::int64_t b = 0; b < 2; ++b) {
        const auto rows = rows_of(x, b);
        for (std::int64_t t = 0; t < 5; ++t) {
            std::vector<Token> keys;
            for (std::int64_t j = 0; j <= t; ++j) keys.push_back({rows[j], j, &w});
            const auto ref = attend({rows[t], t, &w}, keys, cfg);
            for (std::int64_t j = 0; j < 8; ++j) CHECK(std::abs(out.at({b, t, j}) - ref[j]) < 1e-6);
        }
    }
}

TEST_CASE("standard causal attention edge cases") {
    Rng rng(2);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    // S = 1: output is the value projection pushed through W_o.
    const auto x1 = rng.normal_tensor({1, 1, 8});
    const auto out1 = standard_causal_attention(x1, w, cfg);
    const auto ref = o::matmul(o::matmul(x1, w.wv), w.wo);
    CHECK(max_diff(out1, ref) < 1e-12);

    const auto x = rng.normal_tensor({1, 6, 8});
    const auto base = standard_causal_attention(x, w, cfg);
    const auto moved = standard_causal_attention(with_row(x, 0, 4, 0.7), w, cfg);
    for (std::int64_t t = 0; t < 4; ++t) {
        for (std::int64_t j = 0; j < 8; ++j) CHECK(base.at({0, t, j}) == moved.at({0, t, j}));
    }
}

TEST_CASE("bidirectional attention: loop oracle, S=1, permutation equivariance") {
    Rng rng(3);
    AttentionConfig cfg{2, 4};
    cfg.causal = false;
    const auto w = random_weights(8, rng);
    const auto x = rng.normal_tensor({2, 4, 8});
    const auto out = bidirectional_attention(x, w, cfg);
    for (std::int64_t b = 0; b < 2; ++b) {
        const auto rows = rows_of(x, b);
        std::vector<Token> keys;
        for (std::int64_t j = 0; j < 4; ++j) keys.push_back({rows[j], j, &w});
        for (std::int64_t t = 0; t < 4; ++t) {
            const auto ref = attend({rows[t], t, &w}, keys, cfg);
            for (std::int64_t j = 0; j < 8; ++j) CHECK(std::abs(out.at({b, t, j}) - ref[j]) < 1e-6);
        }
    }

    const auto x1 = rng.normal_tensor({1, 1, 8});
    CHECK(max_diff(bidirectional_attention(x1, w, cfg), o::matmul(o::matmul(x1, w.wv), w.wo)) < 1e-12);

    cfg.use_rotary = false;
    const std::vector<std::int64_t> perm{2, 0, 3, 1};
    std::vector<double> permuted;
    for (auto p : perm)
        for (std::int64_t j = 0; j < 8; ++j) permuted.push_back(x.at({0, p, j}));
    const auto x0 = o::slice(x, 0, 0, 1);
    const auto out_plain = bidirectional_attention(x0, w, cfg);
    const auto out_perm = bidirectional_attention(Tensor::from_data({1, 4, 8}, permuted), w, cfg);
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::int64_t j = 0; j < 8; ++j)
            CHECK(std::abs(out_perm.at({0, static_cast<std::int64_t>(i), j}) - out_plain.at({0, perm[i], j})) < 1e-12);
}

TEST_CASE("EBT attention matches the per-position loop oracle") {
    Rng rng(4);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    for (std::int64_t prefix : {0, 1}) {
        const std::int64_t s = 4;
        const SequencePair pair{rng.normal_tensor({2, s + prefix, 8}), rng.normal_tensor({2, s, 8})};
        const auto out = ebt_causal_attention_efficient(pair, w, cfg);
        for (std::int64_t b = 0; b < 2; ++b) {
            const auto obs = rows_of(pair.observed, b);
            const auto pred = rows_of(pair.predicted, b);
            for (std::int64_t t = 0; t < s; ++t) {
                std::vector<Token> keys;
                for (std::int64_t j = 0; j <= t + prefix; ++j) keys.push_back({obs[j], j, &w});
                const Token self{pred[t], t + prefix + 1, &w};
                keys.push_back(self);
                const auto ref = attend(self, keys, cfg);
                for (std::int64_t j = 0; j < 8; ++j) CHECK(std::abs(out.predicted.at({b, t, j}) - ref[j]) < 1e-6);
            }
        }
        // Observed outputs are plain causal attention.
        CHECK(max_diff(out.observed, standard_causal_attention(pair.observed, w, cfg)) < 1e-12);
    }
}

TEST_CASE("S=1 prediction row mixes exactly one observed state and itself") {
    Rng rng(5);
    const AttentionConfig cfg{1, 4};
    const auto w = random_weights(4, rng);
    const SequencePair pair{rng.normal_tensor({1, 1, 4}), rng.normal_tensor({1, 1, 4})};
    const auto out = ebt_causal_attention_efficient(pair, w, cfg);
    const auto obs = rows_of(pair.observed, 0);
    const auto pred = rows_of(pair.predicted, 0);
    const Token self{pred[0], 1, &w};
    const auto ref = attend(self, {{obs[0], 0, &w}, self}, cfg);
    for (std::int64_t j = 0; j < 4; ++j) CHECK(std::abs(out.predicted.at({0, 0, j}) - ref[j]) < 1e-12);
}

TEST_CASE("efficient and simplified EBT attention agree") {
    Rng rng(6);
    const AttentionConfig cfg{2, 4};
    for (std::int64_t s : {1, 2, 3, 5, 8}) {
        for (int draw = 0; draw < 4; ++draw) {
            const auto w = random_weights(8, rng);
            const SequencePair pair{rng.normal_tensor({2, s, 8}), rng.normal_tensor({2, s, 8})};
            const auto a = ebt_causal_attention_efficient(pair, w, cfg);
            const auto b = ebt_causal_attention_simplified(pair, w, cfg);
            CHECK(max_diff(a.observed, b.observed) < 1e-10);
            CHECK(max_diff(a.predicted, b.predicted) < 1e-10);
        }
    }
    SUBCASE("unshared prediction weights") {
        const auto w = random_weights(8, rng);
        const auto wp = random_weights(8, rng);
        const SequencePair pair{rng.normal_tensor({2, 6, 8}), rng.normal_tensor({2, 5, 8})};
        const auto a = ebt_causal_attention_efficient(pair, w, wp, cfg);
        const auto b = ebt_causal_attention_simplified(pair, w, wp, cfg);
        CHECK(max_diff(a.predicted, b.predicted) < 1e-10);
    }
    SUBCASE("32-bit storage") {
        set_precision(Precision::F32);
        const auto w = random_weights(8, rng);
        const SequencePair pair{rng.normal_tensor({2, 5, 8}), rng.normal_tensor({2, 5, 8})};
        const auto a = ebt_causal_attention_efficient(pair, w, cfg);
        const auto b = ebt_causal_attention_simplified(pair, w, cfg);
        CHECK(max_diff(a.predicted, b.predicted) < 1e-6);
        set_precision(Precision::F64);
    }
}

TEST_CASE("predictions are independent and never see the future") {
    Rng rng(7);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    const std::int64_t s = 5;
    const SequencePair pair{rng.normal_tensor({1, s, 8}), rng.normal_tensor({1, s, 8})};
    const auto base = ebt_causal_attention_efficient(pair, w, cfg);
    for (std::int64_t k = 0; k < s; ++k) {
        const auto moved_p = ebt_causal_attention_efficient({pair.observed, with_row(pair.predicted, 0, k, 0.9)}, w, cfg);
        const auto moved_o = ebt_causal_attention_efficient({with_row(pair.observed, 0, k, 0.9), pair.predicted}, w, cfg);
        for (std::int64_t t = 0; t < s; ++t) {
            for (std::int64_t j = 0; j < 8; ++j) {
                if (t != k) CHECK(moved_p.predicted.at({0, t, j}) == base.predicted.at({0, t, j}));
                if (k > t) CHECK(moved_o.predicted.at({0, t, j}) == base.predicted.at({0, t, j}));
            }
        }
    }
}

TEST_CASE("generalized causal mask row counts") {
    for (std::int64_t s : {1, 3, 6}) {
        const auto m = masks::generalized_causal(s, 0);
        const auto n = 2 * s;
        for (std::int64_t t = 0; t < s; ++t) {
            int open = 0;
            for (std::int64_t j = 0; j < n; ++j) open += m.at({s + t, j}) == 0.0;
            // zero-based row t: observed 0..t plus itself (t+1 entries when counting from 1)
            CHECK(open == t + 2);
        }
        for (std::int64_t i = 0; i < s; ++i) {
            int open = 0;
            for (std::int64_t j = 0; j < n; ++j) open += m.at({i, j}) == 0.0;
            CHECK(open == i + 1);
        }
    }
}

TEST_CASE("predictions equal to the true next states reproduce shifted causal attention") {
    Rng rng(8);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    const std::int64_t s = 3;
    const auto seq = rng.normal_tensor({1, s + 1, 8});
    const SequencePair pair{o::slice(seq, 1, 0, s), o::slice(seq, 1, 1, s + 1)};
    const auto out = ebt_causal_attention_simplified(pair, w, cfg);
    const auto causal = standard_causal_attention(seq, w, cfg);
    for (std::int64_t t = 0; t < s; ++t)
        for (std::int64_t j = 0; j < 8; ++j) CHECK(std::abs(out.predicted.at({0, t, j}) - causal.at({0, t + 1, j})) < 1e-12);
}

TEST_CASE("rms normalize, rotary identity, gated mlp gradient") {
    const auto c = Tensor::full({1, 6}, -3.5);
    const auto n = rms_normalize(c, Tensor::ones({6}));
    for (double v : n.data()) CHECK(v == doctest::Approx(-1.0).epsilon(1e-6));

    Rng rng(9);
    const auto x = rng.normal_tensor({1, 2, 1, 4});
    const auto r = rotary_encode(x, {0}, 10000.0);
    CHECK(bit_identical(r, x));
    CHECK(max_diff(rotary_encode(x, {3}, 10000.0), x) > 1e-3);

    const auto w1 = rng.normal_tensor({4, 4}, 0.5);
    const auto w3 = rng.normal_tensor({4, 4}, 0.5);
    const auto w2 = rng.normal_tensor({4, 4}, 0.5);
    const auto probe = rng.normal_tensor({3, 4});
    const auto f = [&](const Tensor& in) { return o::sum_all(o::mul(gated_mlp(in, w1, w3, w2), probe)); };
    CHECK(finite_difference_check(f, rng.normal_tensor({3, 4}), 1e-5) < 1e-4);
}

TEST_CASE("block gradients pass finite differences") {
    Rng rng(10);
    AttentionConfig cfg{2, 4};
    auto w = BlockWeights::init(8, 8, false, rng);
    const auto obs = rng.normal_tensor({1, 4, 8});
    const auto pred = rng.normal_tensor({1, 3, 8});
    const auto probe = rng.normal_tensor({1, 3, 8});
    const auto through_pred = [&](const Tensor& p) {
        return o::sum_all(o::mul(block_forward(SequencePair{obs, p}, w, cfg).predicted, probe));
    };
    CHECK(finite_difference_check(through_pred, pred, 1e-5) < 1e-4);
    const auto through_weight = [&](const Tensor& wq) {
        auto local = w;
        local.attn.wq = wq;
        return o::sum_all(o::mul(block_forward(SequencePair{obs, pred}, local, cfg).predicted, probe));
    };
    CHECK(finite_difference_check(through_weight, w.attn.wq.detach(), 1e-5) < 1e-4);

    cfg.causal = false;
    const auto x = rng.normal_tensor({1, 4, 8});
    const auto probe2 = rng.normal_tensor({1, 4, 8});
    const auto bidir = [&](const Tensor& in) { return o::sum_all(o::mul(block_forward(in, w, cfg), probe2)); };
    CHECK(finite_difference_check(bidir, x, 1e-5) < 1e-4);
}

TEST_CASE("step embedding") {
    Rng rng(11);
    const auto table = xavier_uniform(3, 8, rng);
    const auto a = step_embedding(table, 0, 2);
    const auto b = step_embedding(table, 1, 2);
    CHECK(a.shape() == Shape{2, 1, 8});
    CHECK(max_diff(a, b) > 0.0);
    CHECK_THROWS_AS(step_embedding(table, 3, 2), ContractViolation);
    CHECK_THROWS_AS(step_embedding(table, -1, 2), ContractViolation);
}

TEST_CASE("shape contract errors") {
    Rng rng(12);
    const AttentionConfig cfg{2, 4};
    const auto w = random_weights(8, rng);
    CHECK_THROWS_AS(standard_causal_attention(rng.normal_tensor({1, 3, 6}), w, cfg), ContractViolation);
    CHECK_THROWS_AS(ebt_causal_attention_efficient({rng.normal_tensor({1, 2, 8}), rng.normal_tensor({1, 3, 8})}, w, cfg),
                    ContractViolation);
}
