#include "ebt/model/model.hpp"

#include <algorithm>
#include <cmath>

#include "ebt/autodiff/ops.hpp"
#include "ebt/model/checkpoint.hpp"
#include "ebt/errors.hpp"
#include "ebt/util/ini.hpp"

namespace ebt {
namespace o = ebt::ops;

Context Context::from_tokens(std::vector<std::int64_t> ids, std::int64_t batch, std::int64_t length) {
    EBT_REQUIRE(batch > 0 && length > 0, "context needs a positive batch and length");
    EBT_REQUIRE(static_cast<std::int64_t>(ids.size()) == batch * length,
                "context has " + std::to_string(ids.size()) + " ids, expected " + std::to_string(batch * length));
    Context c;
    c.tokens = std::move(ids);
    c.batch = batch;
    c.length = length;
    return c;
}

Context Context::from_features(const Tensor& features) {
    EBT_REQUIRE(features.rank() == 3, "feature context must be [B, S, F], got " + shape_str(features.shape()));
    Context c;
    c.features = features;
    c.batch = features.dim(0);
    c.length = features.dim(1);
    return c;
}

Context Context::rows(std::int64_t begin, std::int64_t end) const {
    EBT_REQUIRE(0 <= begin && begin < end && end <= batch, "context row range out of bounds");
    if (discrete()) {
        return from_tokens({tokens.begin() + begin * length, tokens.begin() + end * length}, end - begin, length);
    }
    return from_features(o::slice(features, 0, begin, end));
}

Tensor init_prediction(std::int64_t batch, std::int64_t length, std::int64_t dims, Rng& rng) {
    EBT_REQUIRE(batch > 0 && length > 0 && dims > 0, "prediction dimensions must be positive");
    return rng.normal_tensor({batch, length, dims});
}

Tensor init_prediction(std::int64_t batch, std::int64_t length, std::int64_t dims, std::uint64_t seed) {
    Rng rng(seed);
    return init_prediction(batch, length, dims, rng);
}

ThinkStepResult think_step(const EnergyFn& energy, const Tensor& prediction, const Tensor& alpha_eff,
                           const ThinkStepOptions& opts) {
    EBT_REQUIRE(prediction.rank() == 3, "prediction must be [B, S, K], got " + shape_str(prediction.shape()));
    EBT_REQUIRE(alpha_eff.shape() == Shape({prediction.dim(0), prediction.dim(1)}),
                "step sizes " + shape_str(alpha_eff.shape()) + " do not match prediction " +
                    shape_str(prediction.shape()));
    EBT_REQUIRE(opts.sigma >= 0.0, "langevin sigma must be >= 0");
    for (double a : alpha_eff.data()) EBT_REQUIRE(a >= 0.0, "step sizes must be non-negative");

    // The energy gradient is always taken wrt a node that requires grad. With
    // detach, that node is a fresh leaf so no history before this step survives.
    const bool keep_history = !opts.detach && prediction.requires_grad();
    const Tensor y = keep_history ? prediction : prediction.detach_requires_grad();

    const Tensor e = energy(y);
    EBT_REQUIRE(e.shape() == alpha_eff.shape(),
                "energy shape " + shape_str(e.shape()) + " does not match " + shape_str(alpha_eff.shape()));
    Tensor g = grad(o::sum_all(e), y, opts.create_graph);

    double sq = 0.0;
    for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw InstabilityError("non-finite energy gradient at optimization step " + std::to_string(opts.step),
                               opts.step, norm);
    }
    if (opts.grad_clamp) g = o::clamp(g, -*opts.grad_clamp, *opts.grad_clamp);

    const auto a = o::reshape(alpha_eff, {alpha_eff.dim(0), alpha_eff.dim(1), 1});
    Tensor next = o::sub(opts.create_graph || keep_history ? y : y.detach(), o::mul(a, g));
    if (opts.sigma > 0.0) {
        EBT_REQUIRE(opts.rng != nullptr, "langevin noise needs an rng");
        next = o::add(next, opts.rng->normal_tensor(prediction.shape(), opts.sigma));
    }
    if (!opts.create_graph && !keep_history) next = next.detach();
    return {next, e};
}

namespace {

Tensor normal_leaf(const Shape& shape, double stddev, Rng& rng) {
    return rng.normal_tensor(shape, stddev).detach_requires_grad();
}

constexpr double kEmbedStd = 0.02;

}  // namespace

EbtModel::EbtModel(EBTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto d = cfg_.embed_dim;
    attn_.heads = cfg_.heads;
    attn_.head_dim = cfg_.head_dim();
    attn_.rotary_base = cfg_.rotary_base;
    attn_.causal = cfg_.architecture == Architecture::Causal;

    Rng rng(seed);
    if (cfg_.modality == Modality::Discrete) {
        token_embed_ = normal_leaf({cfg_.vocab_size, d}, kEmbedStd, rng);
        if (!cfg_.tie_embeddings) vocab_embed_ = normal_leaf({cfg_.vocab_size, d}, kEmbedStd, rng);
    } else {
        input_proj_ = nn::xavier_uniform(cfg_.feature_dim, d, rng);
        if (!cfg_.tie_embeddings) pred_proj_ = nn::xavier_uniform(cfg_.feature_dim, d, rng);
    }
    if (cfg_.architecture == Architecture::Bidirectional) segment_embed_ = normal_leaf({2, d}, kEmbedStd, rng);
    if (cfg_.use_step_embedding) step_table_ = normal_leaf({cfg_.step_table_size(), d}, kEmbedStd, rng);
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
        blocks_.push_back(nn::BlockWeights::init(d, cfg_.ffn_dim(), cfg_.separate_prediction_attention, rng));
    }
    final_norm_ = Tensor::ones({d}).detach_requires_grad();
    energy_head_ = nn::xavier_uniform(d, 1, rng);
    alpha_ = Tensor::scalar(cfg_.alpha, cfg_.alpha_learnable);
}

std::int64_t EbtModel::step_row(std::int64_t step_index) const {
    EBT_REQUIRE(step_index >= 0, "step index must be >= 0");
    if (cfg_.shared_step_index) return 0;
    // Inference may run more steps than were trained; later steps reuse the last row.
    return std::min(step_index, step_table_.dim(0) - 1);
}

Tensor EbtModel::vocab_to_embed(const Tensor& distribution) const {
    EBT_REQUIRE(cfg_.modality == Modality::Discrete, "vocab_to_embed needs a discrete model");
    EBT_REQUIRE(distribution.rank() == 3 && distribution.dim(2) == cfg_.vocab_size,
                "distribution must be [B, S, " + std::to_string(cfg_.vocab_size) + "], got " +
                    shape_str(distribution.shape()));
    return o::matmul(distribution, cfg_.tie_embeddings ? token_embed_ : vocab_embed_);
}

Tensor EbtModel::embed_tokens(const std::vector<std::int64_t>& ids, std::int64_t batch, std::int64_t length) const {
    for (auto id : ids) {
        EBT_REQUIRE(id >= 0 && id < cfg_.vocab_size,
                    "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
    }
    return o::take_rows(token_embed_, ids, {batch, length});
}

Tensor EbtModel::distribution_embedding(const Tensor& prediction) const {
    if (cfg_.modality == Modality::Discrete) {
        return vocab_to_embed(cfg_.normalize_input_distribution ? o::softmax(prediction) : prediction);
    }
    return o::matmul(prediction, cfg_.tie_embeddings ? input_proj_ : pred_proj_);
}

Tensor EbtModel::energy(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const {
    EBT_REQUIRE(ctx.discrete() == (cfg_.modality == Modality::Discrete), "context kind does not match the model");
    EBT_REQUIRE(prediction.rank() == 3 && prediction.dim(0) == ctx.batch && prediction.dim(1) == ctx.length &&
                    prediction.dim(2) == cfg_.prediction_dim(),
                "prediction " + shape_str(prediction.shape()) + " does not match context [" +
                    std::to_string(ctx.batch) + "," + std::to_string(ctx.length) + "] with width " +
                    std::to_string(cfg_.prediction_dim()));
    if (!ctx.discrete()) {
        EBT_REQUIRE(ctx.features.dim(2) == cfg_.feature_dim, "context feature width does not match the model");
    }
    forwards_.fetch_add(1);
    return cfg_.architecture == Architecture::Causal ? energy_causal(ctx, prediction, step_index)
                                                     : energy_bidirectional(ctx, prediction, step_index);
}

Tensor EbtModel::energy_causal(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const {
    const auto b = ctx.batch;
    Tensor observed = ctx.discrete() ? embed_tokens(ctx.tokens, b, ctx.length) : o::matmul(ctx.features, input_proj_);
    if (cfg_.use_step_embedding) {
        observed = o::concat({nn::step_embedding(step_table_, step_row(step_index), b), observed}, 1);
    }
    nn::SequencePair pair{observed, distribution_embedding(prediction)};
    for (const auto& w : blocks_) pair = nn::block_forward(pair, w, attn_);
    const auto h = nn::rms_normalize(pair.predicted, final_norm_);
    return o::reshape(o::matmul(h, energy_head_), {b, ctx.length});
}

Tensor EbtModel::energy_bidirectional(const Context& ctx, const Tensor& prediction, std::int64_t step_index) const {
    const auto b = ctx.batch;
    const auto t = ctx.length;
    const auto d = cfg_.embed_dim;
    const auto seg = [&](std::int64_t i) { return o::reshape(o::take_rows(segment_embed_, {i}, {1}), {1, 1, d}); };
    const auto context = o::add(o::matmul(ctx.features, input_proj_), seg(0));
    Tensor pred = o::add(distribution_embedding(prediction), seg(1));
    if (cfg_.use_step_embedding) pred = o::add(pred, nn::step_embedding(step_table_, step_row(step_index), 1));

    std::vector<std::int64_t> positions(static_cast<std::size_t>(2 * t));
    for (std::int64_t i = 0; i < t; ++i) positions[i] = positions[t + i] = i;
    Tensor x = o::concat({context, pred}, 1);
    for (const auto& w : blocks_) x = nn::block_forward(x, w, attn_, positions);
    const auto h = nn::rms_normalize(o::slice(x, 1, t, 2 * t), final_norm_);
    return o::reshape(o::matmul(h, energy_head_), {b, t});
}

ThinkStepResult EbtModel::think_step(const Context& ctx, const Tensor& prediction, const Tensor& alpha_eff,
                                     std::int64_t step_index, const ThinkStepOptions& opts) const {
    auto f = [&](const Tensor& y) { return energy(ctx, y, step_index); };
    return ebt::think_step(f, prediction, alpha_eff, opts);
}

std::vector<Parameter> EbtModel::parameters() {
    std::vector<Parameter> out;
    const auto add = [&](std::string name, Tensor& t, bool decay, bool embedding) {
        if (t.defined()) out.push_back({std::move(name), &t, decay, 1.0, embedding});
    };
    add("token_embed", token_embed_, true, true);
    add("vocab_embed", vocab_embed_, true, true);
    add("input_proj", input_proj_, true, true);
    add("pred_proj", pred_proj_, true, true);
    add("segment_embed", segment_embed_, true, true);
    add("step_table", step_table_, true, true);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        blocks_[l].visit([&](const char* suffix, Tensor& t) {
            const std::string s = suffix;
            add("block" + std::to_string(l) + "." + s, t, s.find("norm") == std::string::npos, false);
        });
    }
    add("final_norm", final_norm_, false, false);
    add("energy_head", energy_head_, true, false);
    if (cfg_.alpha_learnable) out.push_back({"alpha", &alpha_, false, cfg_.alpha_lr_multiplier, false});
    return out;
}

std::int64_t EbtModel::parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.slot->numel();
    return n;
}

std::int64_t EbtModel::nonembedding_parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : parameters())
        if (!p.embedding && p.name != "alpha") n += p.slot->numel();
    return n;
}

void EbtModel::save(const std::string& path) {
    ini::Document header;
    cfg_.write(header.section("model"));
    write_checkpoint(path, "ebt", std::move(header), parameters());
}

std::unique_ptr<EbtModel> EbtModel::load(const std::string& path) {
    const auto file = read_checkpoint(path);
    if (file.kind != "ebt") throw ConfigError("'" + path + "' holds a '" + file.kind + "' model, not an EBT");
    const auto* model_sec = file.header.find("model");
    if (!model_sec) throw ConfigError("checkpoint header is missing the model section");
    auto model = std::make_unique<EbtModel>(EBTConfig::read(*model_sec), 0);
    file.restore(model->parameters());
    return model;
}

}  // namespace ebt
