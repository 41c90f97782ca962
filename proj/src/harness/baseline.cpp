#include "ebt/harness/baseline.hpp"

#include <cmath>

#include "ebt/autodiff/ops.hpp"
#include "ebt/harness/flops.hpp"
#include "ebt/model/checkpoint.hpp"

namespace ebt::harness {

namespace o = ebt::ops;

namespace {

constexpr double kEmbedStd = 0.02;

bool tied(const EBTConfig& cfg) { return cfg.modality == Modality::Discrete && cfg.tie_embeddings; }

}  // namespace

FeedForwardModel::FeedForwardModel(EBTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto d = cfg_.embed_dim;
    attn_.heads = cfg_.heads;
    attn_.head_dim = cfg_.head_dim();
    attn_.rotary_base = cfg_.rotary_base;
    attn_.causal = cfg_.architecture == Architecture::Causal;

    Rng rng(seed);
    if (cfg_.modality == Modality::Discrete) {
        token_embed_ = rng.normal_tensor({cfg_.vocab_size, d}, kEmbedStd).detach_requires_grad();
    } else {
        input_proj_ = nn::xavier_uniform(cfg_.feature_dim, d, rng);
    }
    for (std::int64_t l = 0; l < cfg_.layers; ++l) blocks_.push_back(nn::BlockWeights::init(d, cfg_.ffn_dim(), false, rng));
    final_norm_ = Tensor::ones({d}).detach_requires_grad();
    if (!tied(cfg_)) output_head_ = nn::xavier_uniform(d, cfg_.prediction_dim(), rng);
}

Tensor FeedForwardModel::forward(const Context& ctx) const {
    EBT_REQUIRE(ctx.discrete() == (cfg_.modality == Modality::Discrete), "context modality does not match the model");
    forwards_.fetch_add(1);
    const auto b = ctx.batch, s = ctx.length, d = cfg_.embed_dim;
    Tensor x;
    if (ctx.discrete()) {
        for (auto id : ctx.tokens) {
            EBT_REQUIRE(id >= 0 && id < cfg_.vocab_size, "token id " + std::to_string(id) + " outside vocabulary");
        }
        x = o::reshape(o::take_rows(token_embed_, ctx.tokens, {b * s}), {b, s, d});
    } else {
        EBT_REQUIRE(ctx.features.dim(2) == cfg_.feature_dim, "feature width does not match the model");
        x = o::matmul(ctx.features, input_proj_);
    }
    for (const auto& w : blocks_) x = nn::block_forward(x, w, attn_);
    const auto h = nn::rms_normalize(x, final_norm_);
    return tied(cfg_) ? o::matmul(h, o::transpose(token_embed_)) : o::matmul(h, output_head_);
}

std::vector<Parameter> FeedForwardModel::parameters() {
    std::vector<Parameter> out;
    const auto add = [&](std::string name, Tensor& t, bool decay, bool embedding) {
        if (t.defined()) out.push_back({std::move(name), &t, decay, 1.0, embedding});
    };
    add("token_embed", token_embed_, true, true);
    add("input_proj", input_proj_, true, true);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        blocks_[l].visit([&](const char* suffix, Tensor& t) {
            const std::string s = suffix;
            add("block" + std::to_string(l) + "." + s, t, s.find("norm") == std::string::npos, false);
        });
    }
    add("final_norm", final_norm_, false, false);
    add("output_head", output_head_, true, true);
    return out;
}

std::int64_t FeedForwardModel::parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.slot->numel();
    return n;
}

std::int64_t FeedForwardModel::nonembedding_parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : parameters())
        if (!p.embedding) n += p.slot->numel();
    return n;
}

std::int64_t FeedForwardModel::expected_nonembedding_parameter_count(const EBTConfig& cfg) {
    const auto d = cfg.embed_dim, f = cfg.ffn_dim();
    return cfg.layers * (4 * d * d + 3 * d * f + 2 * d) + d;
}

std::int64_t FeedForwardModel::expected_parameter_count(const EBTConfig& cfg) {
    const auto d = cfg.embed_dim, k = cfg.prediction_dim();
    const std::int64_t input = cfg.modality == Modality::Discrete ? cfg.vocab_size * d : cfg.feature_dim * d;
    const std::int64_t head = tied(cfg) ? 0 : d * k;
    return input + head + expected_nonembedding_parameter_count(cfg);
}

void FeedForwardModel::save(const std::string& path) {
    ini::Document header;
    cfg_.write(header.section("model"));
    write_checkpoint(path, "ff", std::move(header), parameters());
}

std::unique_ptr<FeedForwardModel> FeedForwardModel::load(const std::string& path) {
    const auto file = read_checkpoint(path);
    if (file.kind != "ff") throw ConfigError("'" + path + "' holds a '" + file.kind + "' model, not a baseline");
    const auto* model_sec = file.header.find("model");
    if (!model_sec) throw ConfigError("checkpoint header is missing the model section");
    auto model = std::make_unique<FeedForwardModel>(EBTConfig::read(*model_sec), 0);
    file.restore(model->parameters());
    return model;
}

FeedForwardTrainer::FeedForwardTrainer(FeedForwardModel& model, train::TrainConfig cfg)
    : model_(model), cfg_((cfg.validate(), cfg)), optimizer_(model.parameters(), cfg_) {}

train::RunRecord FeedForwardTrainer::step(const train::TrainBatch& batch) {
    train::RunRecord rec;
    rec.step = step_;
    const auto out = model_.forward(batch.context);
    const auto loss = train::task_loss(cfg_, out, batch);
    rec.loss = loss.item();

    std::vector<Tensor> wrt;
    for (const auto& p : optimizer_.params()) wrt.push_back(*p.slot);
    auto grads = grad(loss, wrt);
    rec.grad_norm = train::clip_global_norm(grads, cfg_.grad_clip);
    rec.clipped_grad_norm = train::global_norm(grads);
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
        throw InstabilityError("non-finite baseline loss or gradient at training step " + std::to_string(step_), step_,
                               rec.grad_norm);
    }
    rec.lr = train::lr_at(std::min(step_ + 1, cfg_.total_steps), cfg_);
    optimizer_.step(grads, rec.lr);

    ++step_;
    nfe_cum_ += 1;
    flops_cum_ += flops_ff_per_token(static_cast<double>(model_.nonembedding_parameter_count())) *
                  static_cast<double>(batch.batch() * batch.length());
    rec.nfe_cum = nfe_cum_;
    rec.flops_cum = flops_cum_;
    return rec;
}

}  // namespace ebt::harness
