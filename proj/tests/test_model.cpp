#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>

#include "ebt/autodiff/ops.hpp"
#include "ebt/errors.hpp"
#include "ebt/model/model.hpp"
#include "ebt/util/ini.hpp"

using namespace ebt;
namespace o = ebt::ops;

namespace {

EBTConfig toy_discrete() {
    auto c = EBTConfig::s1_preset();
    c.layers = 2;
    c.embed_dim = 16;
    c.heads = 2;
    c.vocab_size = 7;
    c.ffn_multiplier = 2.0;
    return c;
}

EBTConfig toy_continuous(Architecture arch) {
    auto c = EBTConfig::s2_preset();
    c.modality = Modality::Continuous;
    c.architecture = arch;
    c.layers = 2;
    c.embed_dim = 8;
    c.heads = 2;
    c.feature_dim = 3;
    return c;
}

Context random_tokens(std::int64_t b, std::int64_t s, std::int64_t v, Rng& rng) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(b * s));
    for (auto& id : ids) id = rng.uniform_int(0, v - 1);
    return Context::from_tokens(ids, b, s);
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
    return true;
}

double max_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

Tensor alphas(std::int64_t b, std::int64_t s, double v) { return Tensor::full({b, s}, v); }

// E(y) = 1/2 ||y - c||^2 per position.
EnergyFn quadratic(const Tensor& c) {
    return [c](const Tensor& y) { return o::mul_scalar(o::sum(o::square(o::sub(y, c)), -1), 0.5); };
}

}  // namespace

TEST_CASE("init_prediction is deterministic and standard normal") {
    const auto a = init_prediction(2, 3, 4, 17);
    CHECK(bit_identical(a, init_prediction(2, 3, 4, 17)));
    CHECK_FALSE(bit_identical(a, init_prediction(2, 3, 4, 18)));

    const auto big = init_prediction(100, 100, 100, 5);
    double mean = 0.0;
    for (double v : big.data()) mean += v;
    mean /= static_cast<double>(big.numel());
    double var = 0.0;
    for (double v : big.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(big.numel());
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.01);
}

TEST_CASE("vocab_to_embed is the probability-weighted sum of embedding rows") {
    EbtModel model(toy_discrete(), 3);
    const auto v = model.config().vocab_size;
    const auto d = model.config().embed_dim;
    std::vector<std::int64_t> all(static_cast<std::size_t>(v));
    for (std::int64_t i = 0; i < v; ++i) all[i] = i;
    const auto table = model.embed_tokens(all, 1, v);  // [1, V, D]

    std::vector<double> onehot(static_cast<std::size_t>(v), 0.0);
    onehot[4] = 1.0;
    const auto e4 = model.vocab_to_embed(Tensor::from_data({1, 1, v}, onehot));
    for (std::int64_t k = 0; k < d; ++k) CHECK(e4.at({0, 0, k}) == table.at({0, 4, k}));

    const auto uni = model.vocab_to_embed(Tensor::full({1, 1, v}, 1.0 / static_cast<double>(v)));
    for (std::int64_t k = 0; k < d; ++k) {
        double m = 0.0;
        for (std::int64_t i = 0; i < v; ++i) m += table.at({0, i, k});
        CHECK(uni.at({0, 0, k}) == doctest::Approx(m / static_cast<double>(v)).epsilon(1e-12));
    }

    std::vector<double> mix(static_cast<std::size_t>(v), 0.0);
    mix[1] = 0.3;
    mix[5] = 0.7;
    const auto em = model.vocab_to_embed(Tensor::from_data({1, 1, v}, mix));
    for (std::int64_t k = 0; k < d; ++k) {
        CHECK(em.at({0, 0, k}) ==
              doctest::Approx(0.3 * table.at({0, 1, k}) + 0.7 * table.at({0, 5, k})).epsilon(1e-12));
    }
}

TEST_CASE("energy is pure and treats batch rows independently") {
    EbtModel model(toy_discrete(), 11);
    Rng rng(2);
    const std::int64_t b = 4, s = 5, v = model.config().vocab_size;
    const auto ctx = random_tokens(b, s, v, rng);
    const auto y = init_prediction(b, s, v, 9);
    const auto e = model.energy(ctx, y, 0);
    CHECK(e.shape() == Shape({b, s}));
    CHECK(bit_identical(e, model.energy(ctx, y, 0)));

    // Identical rows.
    const auto row_ctx = ctx.rows(1, 2);
    const auto row_y = o::slice(y, 0, 1, 2);
    const auto rep = model.energy(Context::from_tokens([&] {
                                      std::vector<std::int64_t> ids;
                                      for (int r = 0; r < 3; ++r)
                                          ids.insert(ids.end(), row_ctx.tokens.begin(), row_ctx.tokens.end());
                                      return ids;
                                  }(),
                                                       3, s),
                                  o::concat({row_y, row_y, row_y}, 0), 0);
    for (std::int64_t t = 0; t < s; ++t) {
        CHECK(rep.at({0, t}) == rep.at({1, t}));
        CHECK(rep.at({0, t}) == rep.at({2, t}));
    }

    // Batch permutation (3, 0, 2, 1).
    const std::vector<std::int64_t> perm{3, 0, 2, 1};
    std::vector<std::int64_t> ids;
    std::vector<Tensor> ys;
    for (auto p : perm) {
        const auto r = ctx.rows(p, p + 1);
        ids.insert(ids.end(), r.tokens.begin(), r.tokens.end());
        ys.push_back(o::slice(y, 0, p, p + 1));
    }
    const auto ep = model.energy(Context::from_tokens(ids, b, s), o::concat(ys, 0), 0);
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < s; ++t) CHECK(ep.at({i, t}) == doctest::Approx(e.at({perm[i], t})).epsilon(1e-12));
}

TEST_CASE("energy gradient passes finite differences") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        Rng rng(100 + seed);
        {
            EbtModel model(toy_discrete(), seed);
            const auto ctx = random_tokens(2, 4, model.config().vocab_size, rng);
            const auto y = init_prediction(2, 4, model.config().vocab_size, seed + 50);
            CHECK(finite_difference_check([&](const Tensor& p) { return o::sum_all(model.energy(ctx, p, 1)); }, y) <
                  1e-4);
        }
        for (auto arch : {Architecture::Causal, Architecture::Bidirectional}) {
            EbtModel model(toy_continuous(arch), seed);
            const auto ctx = Context::from_features(rng.normal_tensor({2, 3, 3}));
            const auto y = init_prediction(2, 3, 3, seed + 60);
            CHECK(finite_difference_check([&](const Tensor& p) { return o::sum_all(model.energy(ctx, p, 0)); }, y) <
                  1e-4);
        }
    }
}

TEST_CASE("energy gradient wrt parameters passes finite differences") {
    EbtModel model(toy_discrete(), 4);
    Rng rng(8);
    const auto ctx = random_tokens(2, 3, model.config().vocab_size, rng);
    const auto y = init_prediction(2, 3, model.config().vocab_size, 3);
    for (auto& p : model.parameters()) {
        if (p.name != "block1.wv" && p.name != "token_embed" && p.name != "step_table" && p.name != "energy_head")
            continue;
        Tensor original = *p.slot;
        const auto f = [&](const Tensor& w) {
            *p.slot = w;
            return o::sum_all(model.energy(ctx, y, 1));
        };
        CHECK_MESSAGE(finite_difference_check(f, original) < 1e-4, p.name);
        *p.slot = original;
    }
}

TEST_CASE("energy rejects mismatched shapes") {
    EbtModel model(toy_discrete(), 1);
    Rng rng(1);
    const auto ctx = random_tokens(2, 4, model.config().vocab_size, rng);
    CHECK_THROWS_AS(model.energy(ctx, init_prediction(2, 5, 7, 1), 0), ContractViolation);
    CHECK_THROWS_AS(model.energy(ctx, init_prediction(2, 4, 6, 1), 0), ContractViolation);
    CHECK_THROWS_AS(model.energy(Context::from_tokens({0, 9}, 1, 2), init_prediction(1, 2, 7, 1), 0),
                    ContractViolation);
}

TEST_CASE("think_step analytic cases") {
    const auto c = Tensor::from_data({1, 2, 3}, {1, -2, 3, 0.5, 0, -1});
    const auto y0 = init_prediction(1, 2, 3, 4);

    SUBCASE("zero step and zero noise is the identity") {
        const auto r = think_step(quadratic(c), y0, alphas(1, 2, 0.0), {});
        CHECK(bit_identical(r.prediction, y0));
    }
    SUBCASE("one unit step on a quadratic lands on the minimum") {
        const auto r = think_step(quadratic(c), y0, alphas(1, 2, 1.0), {});
        CHECK(max_diff(r.prediction, c) < 1e-15);
    }
    SUBCASE("grad clamp bounds the update") {
        ThinkStepOptions opts;
        opts.grad_clamp = 0.1;
        const auto r = think_step(quadratic(c), y0, alphas(1, 2, 1.0), opts);
        for (std::int64_t i = 0; i < y0.numel(); ++i) {
            const double step = y0.data()[i] - r.prediction.data()[i];
            const double expected = std::clamp(y0.data()[i] - c.data()[i], -0.1, 0.1);
            CHECK(step == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    SUBCASE("per-position step sizes") {
        const auto a = Tensor::from_data({1, 2}, {1.0, 0.0});
        const auto r = think_step(quadratic(c), y0, a, {});
        for (int k = 0; k < 3; ++k) {
            CHECK(r.prediction.at({0, 0, k}) == doctest::Approx(c.at({0, 0, k})));
            CHECK(r.prediction.at({0, 1, k}) == y0.at({0, 1, k}));
        }
    }
    SUBCASE("non-finite gradient is an instability carrying the step") {
        const EnergyFn bad = [](const Tensor& y) { return o::sum(o::sqrt(o::mul_scalar(o::square(y), 0.0)), -1); };
        ThinkStepOptions opts;
        opts.step = 7;
        try {
            think_step(bad, y0, alphas(1, 2, 1.0), opts);
            FAIL("expected an instability error");
        } catch (const InstabilityError& e) {
            CHECK(e.step() == 7);
            CHECK_FALSE(std::isfinite(e.norm()));
        }
    }
    SUBCASE("negative step sizes are rejected") {
        CHECK_THROWS_AS(think_step(quadratic(c), y0, alphas(1, 2, -1.0), {}), ContractViolation);
    }
}

TEST_CASE("langevin noise has variance sigma squared") {
    const double sigma = 3.0;
    const auto c = Tensor::zeros({1, 1000, 100});
    const auto y0 = Tensor::zeros({1, 1000, 100});
    Rng rng(77);
    ThinkStepOptions opts;
    opts.sigma = sigma;
    opts.rng = &rng;
    const auto r = think_step(quadratic(c), y0, alphas(1, 1000, 0.0), opts);
    double mean = 0.0, sq = 0.0;
    for (double v : r.prediction.data()) mean += v;
    mean /= static_cast<double>(r.prediction.numel());
    for (double v : r.prediction.data()) sq += (v - mean) * (v - mean);
    const double var = sq / static_cast<double>(r.prediction.numel());
    CHECK(std::abs(var / (sigma * sigma) - 1.0) < 0.02);
}

TEST_CASE("model think_step only moves positions with nonzero step size") {
    EbtModel model(toy_discrete(), 6);
    Rng rng(3);
    const std::int64_t b = 2, s = 5, v = model.config().vocab_size;
    const auto ctx = random_tokens(b, s, v, rng);
    const auto y = init_prediction(b, s, v, 10);
    std::vector<double> a(static_cast<std::size_t>(b * s), 0.0);
    a[2] = 50.0;  // batch 0, position 2
    const auto r = model.think_step(ctx, y, Tensor::from_data({b, s}, a), 0, {});
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < s; ++t)
            for (std::int64_t k = 0; k < v; ++k) {
                const bool same = r.prediction.at({i, t, k}) == y.at({i, t, k});
                if (i == 0 && t == 2) CHECK_FALSE(same);
                else CHECK(same);
            }

    // Changing a later prediction leaves position 2's update untouched.
    std::vector<double> yd(y.data().begin(), y.data().end());
    yd[static_cast<std::size_t>((0 * s + 4) * v)] += 3.0;
    const auto r2 = model.think_step(ctx, Tensor::from_data(y.shape(), yd), Tensor::from_data({b, s}, a), 0, {});
    for (std::int64_t k = 0; k < v; ++k) CHECK(r2.prediction.at({0, 2, k}) == r.prediction.at({0, 2, k}));
}

TEST_CASE("detach limits the differentiated unroll to one step") {
    Rng rng(12);
    const std::int64_t b = 2, s = 3;
    for (bool detach : {true, false}) {
        auto cfg = toy_discrete();
        cfg.detach_between_steps = detach;
        EbtModel model(cfg, 21);
        const auto ctx = random_tokens(b, s, cfg.vocab_size, rng);
        const auto y0 = init_prediction(b, s, cfg.vocab_size, 5).detach_requires_grad();
        ThinkStepOptions opts;
        opts.detach = detach;
        opts.create_graph = true;
        const auto a = alphas(b, s, 20.0);
        const auto y1 = model.think_step(ctx, y0, a, 0, opts).prediction;
        const auto y2 = model.think_step(ctx, y1, a, 1, opts).prediction;
        const auto loss = o::sum_all(o::square(y2));
        const auto g0 = grad(loss, y0);
        double n0 = 0.0;
        for (double x : g0.data()) n0 += x * x;
        if (detach) {
            CHECK(n0 == 0.0);
            // Parameter gradient equals the one from a single step started at detached y1.
            auto params = model.parameters();
            std::vector<Tensor> wrt;
            for (auto& p : params) wrt.push_back(*p.slot);
            const auto full = grad(loss, wrt);
            const auto y2b = model.think_step(ctx, y1.detach(), a, 1, opts).prediction;
            const auto one = grad(o::sum_all(o::square(y2b)), wrt);
            for (std::size_t i = 0; i < wrt.size(); ++i) CHECK(bit_identical(full[i], one[i]));
        } else {
            CHECK(n0 > 0.0);
        }
    }
}

TEST_CASE("step embeddings: shared index versus per-step rows") {
    Rng rng(4);
    auto cfg = toy_discrete();
    const auto ctx = random_tokens(1, 4, cfg.vocab_size, rng);
    const auto y = init_prediction(1, 4, cfg.vocab_size, 2);
    {
        EbtModel per_step(cfg, 1);
        CHECK_FALSE(bit_identical(per_step.energy(ctx, y, 0), per_step.energy(ctx, y, 1)));
        // Steps past the table reuse its last row.
        CHECK(bit_identical(per_step.energy(ctx, y, 1), per_step.energy(ctx, y, 9)));
    }
    cfg.shared_step_index = true;
    EbtModel shared(cfg, 1);
    CHECK(bit_identical(shared.energy(ctx, y, 0), shared.energy(ctx, y, 5)));
}

TEST_CASE("forward counter and parameter bookkeeping") {
    EbtModel model(toy_discrete(), 2);
    Rng rng(1);
    const auto ctx = random_tokens(1, 3, 7, rng);
    const auto y = init_prediction(1, 3, 7, 1);
    model.energy(ctx, y, 0);
    model.think_step(ctx, y, alphas(1, 3, 1.0), 0, {});
    CHECK(model.forward_count() == 2);
    model.reset_forward_count();
    CHECK(model.forward_count() == 0);

    const auto d = 16, f = 32, v = 7;
    const std::int64_t block = 2 * d + 4 * d * d + 3 * d * f;
    CHECK(model.nonembedding_parameter_count() == 2 * block + d + d);
    CHECK(model.parameter_count() == model.nonembedding_parameter_count() + v * d + 2 * d + 1);
    for (const auto& p : model.parameters()) {
        if (p.name == "alpha") {
            CHECK_FALSE(p.decay);
            CHECK(p.lr_scale == 1500.0);
        }
        if (p.name.find("norm") != std::string::npos) CHECK_FALSE(p.decay);
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    const auto path = (std::filesystem::temp_directory_path() / "ebt_test_ckpt.bin").string();
    for (auto arch : {Architecture::Causal, Architecture::Bidirectional}) {
        EbtModel model(toy_continuous(arch), 13);
        model.save(path);
        const auto loaded = EbtModel::load(path);
        Rng rng(5);
        const auto ctx = Context::from_features(rng.normal_tensor({2, 3, 3}));
        const auto y = init_prediction(2, 3, 3, 8);
        CHECK(bit_identical(model.energy(ctx, y, 0), loaded->energy(ctx, y, 0)));
    }
    {
        EbtModel model(toy_discrete(), 13);
        model.save(path);
        const auto loaded = EbtModel::load(path);
        auto a = model.parameters();
        auto b = loaded->parameters();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].name == b[i].name);
            CHECK(bit_identical(*a[i].slot, *b[i].slot));
            CHECK(a[i].slot->requires_grad() == b[i].slot->requires_grad());
        }
    }
    {
        set_precision(Precision::F32);
        EbtModel model(toy_discrete(), 14);
        model.save(path);
        const auto loaded = EbtModel::load(path);
        auto a = model.parameters();
        auto b = loaded->parameters();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(*a[i].slot, *b[i].slot));
        set_precision(Precision::F64);
    }
    CHECK_THROWS_AS(EbtModel::load(path + ".missing"), ConfigError);
    std::remove(path.c_str());
}

TEST_CASE("presets and config serialization") {
    const auto s1 = EBTConfig::s1_preset();
    CHECK(s1.detach_between_steps);
    CHECK_FALSE(s1.truncate_loss_to_last_step);
    CHECK(s1.alpha_learnable);
    CHECK(s1.alpha == 500.0);
    CHECK(s1.num_steps == 2);
    CHECK(s1.langevin_sigma == 0.0);
    CHECK_FALSE(s1.replay_buffer_enabled);
    CHECK_FALSE(s1.randomize_steps);
    CHECK(s1.alpha_random_factor == 1.0);

    const auto s2 = EBTConfig::s2_preset();
    CHECK_FALSE(s2.detach_between_steps);
    CHECK(s2.truncate_loss_to_last_step);
    CHECK_FALSE(s2.alpha_learnable);
    CHECK(s2.randomize_steps);
    CHECK(s2.min_steps == 2);
    CHECK(s2.max_steps == 3);
    CHECK(s2.langevin_sigma == 3.0);
    CHECK(s2.alpha_random_factor == 2.0);
    CHECK(s2.replay_buffer_enabled);

    auto xxs = EBTConfig::s1_preset().apply_size("xxs");
    CHECK(xxs.layers == 6);
    CHECK(xxs.embed_dim == 384);
    CHECK(xxs.heads == 6);

    ini::Document doc;
    auto cfg = toy_continuous(Architecture::Bidirectional);
    cfg.grad_clamp = 0.25;
    cfg.alpha = 0.1 + 0.2;
    cfg.write(doc.section("model"));
    const auto text = ini::serialize(doc);
    const auto back = EBTConfig::read(*ini::parse(text).find("model"));
    ini::Document doc2;
    back.write(doc2.section("model"));
    CHECK(ini::serialize(doc2) == text);
    CHECK(back.alpha == cfg.alpha);
    CHECK(back.grad_clamp == cfg.grad_clamp);

    const auto preset = ini::parse("[model]\npreset = s2\nsize = toy\nvocab_size = 12\n");
    const auto p = EBTConfig::read(*preset.find("model"));
    CHECK(p.variant == Variant::S2);
    CHECK(p.vocab_size == 12);
    CHECK(p.embed_dim == 64);

    CHECK_THROWS_AS(EBTConfig::read(*ini::parse("[m]\nlayers = two\n").find("m")), ConfigError);
    CHECK_THROWS_AS(EBTConfig::read(*ini::parse("[m]\nbogus = 1\n").find("m")), ConfigError);
    CHECK_THROWS_AS(EBTConfig::read(*ini::parse("[m]\nheads = 3\n").find("m")), ConfigError);
}

TEST_CASE("ini parsing") {
    const auto doc = ini::parse("# comment\n[a]\nx = 1\n; other\n  y=two words  \n\n[b]\nz = 3.5\n");
    REQUIRE(doc.sections.size() == 2);
    CHECK(doc.find("a")->get("y") == "two words");
    CHECK(ini::serialize(doc) == "[a]\nx = 1\ny = two words\n\n[b]\nz = 3.5\n");
    CHECK(ini::serialize(ini::parse(ini::serialize(doc))) == ini::serialize(doc));
    CHECK_THROWS_AS(ini::parse("x = 1\n"), ConfigError);
    CHECK_THROWS_AS(ini::parse("[a\n"), ConfigError);
    CHECK_THROWS_AS(ini::parse("[a]\nnovalue\n"), ConfigError);
    CHECK(ini::parse_double("k", ini::format_double(0.1)) == 0.1);
    CHECK(ini::parse_double("k", ini::format_double(1e-4)) == 1e-4);
    CHECK_THROWS_AS(ini::parse_bool("k", "yes"), ConfigError);
}
