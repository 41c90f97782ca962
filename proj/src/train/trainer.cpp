#include "ebt/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ebt/autodiff/ops.hpp"
#include "ebt/errors.hpp"
#include "ebt/harness/flops.hpp"
#include "ebt/tasks/metrics.hpp"

namespace ebt::train {
namespace o = ebt::ops;

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::CrossEntropy: return "cross_entropy";
        case LossKind::SmoothL1: return "smooth_l1";
        case LossKind::MeanSquared: return "mse";
    }
    return "?";
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (warmup_steps < 0 || total_steps < 1) fail("need warmup_steps >= 0 and total_steps >= 1");
    if (warmup_steps > total_steps) fail("warmup_steps must not exceed total_steps");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
    if (!(smooth_l1_beta > 0.0)) fail("smooth_l1_beta must be > 0");
    if (replay_capacity < 1) fail("replay_capacity must be >= 1");
    if (replay_sample_probability < 0.0 || replay_sample_probability > 1.0)
        fail("replay_sample_probability must be in [0, 1]");
}

void TrainConfig::write(ini::Section& s) const {
    using ini::format_double;
    s.set("learning_rate", format_double(learning_rate));
    s.set("warmup_steps", std::to_string(warmup_steps));
    s.set("total_steps", std::to_string(total_steps));
    s.set("batch_size", std::to_string(batch_size));
    s.set("beta1", format_double(beta1));
    s.set("beta2", format_double(beta2));
    s.set("adam_eps", format_double(adam_eps));
    s.set("weight_decay", format_double(weight_decay));
    s.set("grad_clip", format_double(grad_clip));
    s.set("loss", to_string(loss));
    s.set("smooth_l1_beta", format_double(smooth_l1_beta));
    s.set("replay_capacity", std::to_string(replay_capacity));
    s.set("replay_sample_probability", format_double(replay_sample_probability));
    s.set("allow_zero_steps", allow_zero_steps ? "true" : "false");
}

TrainConfig TrainConfig::read(const ini::Section& s) {
    TrainConfig c;
    for (const auto& [key, value] : s.entries) {
        if (key == "learning_rate") c.learning_rate = ini::parse_double(key, value);
        else if (key == "warmup_steps") c.warmup_steps = ini::parse_int(key, value);
        else if (key == "total_steps") c.total_steps = ini::parse_int(key, value);
        else if (key == "batch_size") c.batch_size = ini::parse_int(key, value);
        else if (key == "beta1") c.beta1 = ini::parse_double(key, value);
        else if (key == "beta2") c.beta2 = ini::parse_double(key, value);
        else if (key == "adam_eps") c.adam_eps = ini::parse_double(key, value);
        else if (key == "weight_decay") c.weight_decay = ini::parse_double(key, value);
        else if (key == "grad_clip") c.grad_clip = ini::parse_double(key, value);
        else if (key == "loss") {
            if (value == "cross_entropy") c.loss = LossKind::CrossEntropy;
            else if (value == "smooth_l1") c.loss = LossKind::SmoothL1;
            else if (value == "mse") c.loss = LossKind::MeanSquared;
            else throw ConfigError("loss must be cross_entropy|smooth_l1|mse, got '" + value + "'");
        } else if (key == "smooth_l1_beta") c.smooth_l1_beta = ini::parse_double(key, value);
        else if (key == "replay_capacity") c.replay_capacity = ini::parse_int(key, value);
        else if (key == "replay_sample_probability") c.replay_sample_probability = ini::parse_double(key, value);
        else if (key == "allow_zero_steps") c.allow_zero_steps = ini::parse_bool(key, value);
        else throw ConfigError("unknown train key '" + key + "'");
    }
    c.validate();
    return c;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    EBT_REQUIRE(step >= 0, "step must be >= 0");
    const double base = cfg.learning_rate, floor = base / 10.0;
    if (step < cfg.warmup_steps) return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const auto span = cfg.total_steps - cfg.warmup_steps;
    if (span <= 0 || step >= cfg.total_steps) return step == cfg.warmup_steps ? base : floor;
    const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
    return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor OptimizationSchedule::alpha_eff(const Tensor& alpha) const { return o::mul(alpha_scale, alpha); }

OptimizationSchedule draw_schedule(const EBTConfig& cfg, std::int64_t batch, std::int64_t length, Rng& rng) {
    cfg.validate();
    OptimizationSchedule s;
    s.n_real = cfg.randomize_steps ? rng.uniform_int(cfg.min_steps, cfg.max_steps) : cfg.num_steps;
    const double r = cfg.alpha_random_factor;
    std::vector<double> u(static_cast<std::size_t>(batch * length), 1.0);
    if (r != 1.0) {
        for (auto& x : u) x = rng.uniform(1.0 / r, r);
    }
    s.alpha_scale = Tensor::from_data({batch, length}, std::move(u));
    s.sigma = cfg.langevin_sigma;
    s.detach = cfg.detach_between_steps;
    s.truncate = cfg.truncate_loss_to_last_step;
    s.grad_clamp = cfg.grad_clamp;
    return s;
}

TrainBatch TrainBatch::row(std::int64_t i) const {
    TrainBatch r;
    r.context = context.rows(i, i + 1);
    const auto s = length();
    if (!targets.empty()) r.targets.assign(targets.begin() + i * s, targets.begin() + (i + 1) * s);
    if (!weights.empty()) r.weights.assign(weights.begin() + i * s, weights.begin() + (i + 1) * s);
    if (target_features.defined()) r.target_features = o::slice(target_features, 0, i, i + 1);
    if (initial.defined()) r.initial = o::slice(initial, 0, i, i + 1);
    r.ids = {ids.empty() ? i : ids[static_cast<std::size_t>(i)]};
    return r;
}

TrainBatch TrainBatch::stack(const std::vector<TrainBatch>& rows) {
    EBT_REQUIRE(!rows.empty(), "nothing to stack");
    TrainBatch out;
    const auto s = rows[0].length();
    std::vector<std::int64_t> tokens;
    std::vector<Tensor> feats, tf, init;
    for (const auto& r : rows) {
        EBT_REQUIRE(r.length() == s, "stacked rows differ in length");
        if (r.context.discrete()) tokens.insert(tokens.end(), r.context.tokens.begin(), r.context.tokens.end());
        else feats.push_back(r.context.features);
        out.targets.insert(out.targets.end(), r.targets.begin(), r.targets.end());
        if (r.target_features.defined()) tf.push_back(r.target_features);
        if (r.initial.defined()) init.push_back(r.initial);
        out.ids.insert(out.ids.end(), r.ids.begin(), r.ids.end());
        out.weights.insert(out.weights.end(), r.weights.begin(), r.weights.end());
    }
    if (out.weights.size() != out.targets.size()) out.weights.clear();
    const auto b = static_cast<std::int64_t>(rows.size());
    out.context = feats.empty() ? Context::from_tokens(tokens, b, s) : Context::from_features(o::concat(feats, 0));
    if (!tf.empty()) out.target_features = o::concat(tf, 0);
    if (init.size() == rows.size()) out.initial = o::concat(init, 0);
    return out;
}

TrainBatch token_batch(const tasks::TokenBatch& tokens, std::int64_t first_id) {
    TrainBatch b;
    b.context = Context::from_tokens(tokens.context, tokens.batch, tokens.length);
    b.targets = tokens.targets;
    b.weights = tokens.weights;
    for (std::int64_t i = 0; i < tokens.batch; ++i) b.ids.push_back(first_id + i);
    return b;
}

ReplayBuffer::ReplayBuffer(std::int64_t capacity, double sample_probability)
    : capacity_(capacity), probability_(sample_probability) {
    EBT_REQUIRE(capacity >= 1, "replay capacity must be >= 1");
    EBT_REQUIRE(sample_probability >= 0.0 && sample_probability <= 1.0, "sample probability must be in [0, 1]");
}

void ReplayBuffer::push(ReplayEntry entry) {
    entry.prediction = entry.prediction.detach();
    entries_.push_back(std::move(entry));
    while (static_cast<std::int64_t>(entries_.size()) > capacity_) entries_.pop_front();
}

std::optional<ReplayEntry> ReplayBuffer::sample(Rng& rng) const {
    if (entries_.empty() || probability_ <= 0.0) return std::nullopt;
    if (rng.uniform() >= probability_) return std::nullopt;
    return entries_[static_cast<std::size_t>(rng.uniform_int(0, size() - 1))];
}

AdamW::AdamW(std::vector<Parameter> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.slot->numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.slot->numel()), 0.0);
    }
}

void AdamW::step(const std::vector<Tensor>& grads, double lr) {
    EBT_REQUIRE(grads.size() == params_.size(), "one gradient per parameter expected");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        const auto g = grads[i].data();
        const auto w = p.slot->data();
        EBT_REQUIRE(static_cast<std::size_t>(g.size()) == w.size(), "gradient shape mismatch for " + p.name);
        const double rate = lr * p.lr_scale;
        std::vector<double> next(w.begin(), w.end());
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < next.size(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
            if (p.decay) next[k] -= rate * cfg_.weight_decay * next[k];
            next[k] -= rate * update;
        }
        // The step size is a parameter too; keep it usable as one.
        if (p.name == "alpha") next[0] = std::max(next[0], 0.0);
        *p.slot = Tensor::from_data(p.slot->shape(), std::move(next), true);
    }
}

double global_norm(const std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double x : g.data()) sq += x * x;
    return std::sqrt(sq);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (norm > max_norm) {
        const double scale = max_norm / (norm + 1e-6);
        for (auto& g : grads) g = o::mul_scalar(g, scale);
    }
    return norm;
}

MetricsCsv::MetricsCsv(std::ostream& out) : out_(out) { out_ << kHeader << '\n'; }

std::string MetricsCsv::row(const RunRecord& r) {
    using ini::format_double;
    std::ostringstream s;
    s << r.step << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ',' << format_double(r.grad_norm)
      << ',' << format_double(r.e_init_mean) << ',' << format_double(r.e_final_mean) << ',' << r.n_real << ','
      << r.nfe_cum << ',' << format_double(r.flops_cum);
    return s.str();
}

void MetricsCsv::append(const RunRecord& r) {
    for (double v : {r.loss, r.lr, r.grad_norm, r.e_init_mean, r.e_final_mean, r.flops_cum}) {
        EBT_REQUIRE(std::isfinite(v), "refusing to write a non-finite metric at step " + std::to_string(r.step));
    }
    out_ << row(r) << '\n';
    out_.flush();
}

Trainer::Trainer(EbtModel& model, TrainConfig cfg, std::uint64_t seed)
    : model_(model),
      cfg_((cfg.validate(), cfg)),
      rng_(seed),
      optimizer_(model.parameters(), cfg_),
      replay_(cfg_.replay_capacity, cfg_.replay_sample_probability) {}

Tensor task_loss(const TrainConfig& cfg, const Tensor& prediction, const TrainBatch& batch) {
    switch (cfg.loss) {
        case LossKind::CrossEntropy: return tasks::cross_entropy(prediction, batch.targets);
        case LossKind::SmoothL1: return tasks::smooth_l1(prediction, batch.target_features, cfg.smooth_l1_beta);
        case LossKind::MeanSquared: return o::mean_all(o::square(o::sub(prediction, batch.target_features)));
    }
    return {};
}

Tensor Trainer::task_loss(const Tensor& prediction, const TrainBatch& batch) const {
    return train::task_loss(cfg_, prediction, batch);
}

UnrollResult unroll(const StepEnergyFn& energy, const Tensor& y0, const Tensor& alpha_eff,
                    const OptimizationSchedule& schedule, const LossFn& loss, Rng* rng) {
    ThinkStepOptions opts;
    opts.sigma = schedule.sigma;
    opts.grad_clamp = schedule.grad_clamp;
    opts.detach = schedule.detach;
    opts.create_graph = true;
    opts.rng = rng;

    UnrollResult out;
    Tensor y = y0;
    for (std::int64_t i = 0; i < schedule.n_real; ++i) {
        opts.step = i;
        opts.sigma = i + 1 < schedule.n_real ? schedule.sigma : 0.0;
        const auto r = think_step([&](const Tensor& p) { return energy(p, i); }, y, alpha_eff, opts);
        out.energies.push_back(r.energy);
        y = r.prediction;
        if (!schedule.truncate) out.step_losses.push_back(loss(y));
    }
    out.prediction = y;
    if (schedule.n_real == 0) {
        out.loss = loss(y0);
    } else if (schedule.truncate) {
        out.loss = loss(y);
    } else {
        Tensor total = out.step_losses[0];
        for (std::size_t i = 1; i < out.step_losses.size(); ++i) total = o::add(total, out.step_losses[i]);
        out.loss = o::mul_scalar(total, 1.0 / static_cast<double>(out.step_losses.size()));
    }
    return out;
}

RunRecord Trainer::step(const TrainBatch& batch) {
    return step(batch, draw_schedule(model_.config(), batch.batch(), batch.length(), rng_));
}

namespace {

double mean_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s / static_cast<double>(t.numel());
}

}  // namespace

RunRecord Trainer::step(const TrainBatch& input, const OptimizationSchedule& schedule) {
    const auto& mcfg = model_.config();
    EBT_REQUIRE(schedule.n_real >= 1 || cfg_.allow_zero_steps, "training needs at least one optimization step");
    EBT_REQUIRE(schedule.alpha_scale.shape() == Shape({input.batch(), input.length()}),
                "schedule does not match the batch");
    const auto b = input.batch(), s = input.length(), k = mcfg.prediction_dim();

    TrainBatch batch = input;
    Tensor y0 = input.initial.defined() ? input.initial.detach() : init_prediction(b, s, k, rng_);
    std::vector<std::int64_t> prior(static_cast<std::size_t>(b), 0);
    std::int64_t replayed = 0;
    if (mcfg.replay_buffer_enabled) {
        std::vector<TrainBatch> rows;
        std::vector<Tensor> starts;
        for (std::int64_t i = 0; i < b; ++i) {
            if (auto e = replay_.sample(rng_)) {
                rows.push_back(e->example);
                starts.push_back(e->prediction);
                prior[i] = e->steps_taken;
                ++replayed;
            } else {
                rows.push_back(input.row(i));
                starts.push_back(o::slice(y0, 0, i, i + 1));
            }
        }
        if (replayed > 0) {
            batch = TrainBatch::stack(rows);
            y0 = o::concat(starts, 0);
        }
    }

    const Tensor alpha_eff = schedule.alpha_eff(model_.alpha());
    RunRecord rec;
    rec.step = step_;
    const auto un = unroll([&](const Tensor& p, std::int64_t i) { return model_.energy(batch.context, p, i); }, y0,
                           alpha_eff, schedule, [&](const Tensor& p) { return task_loss(p, batch); }, &rng_);
    const Tensor& y = un.prediction;
    const Tensor& loss = un.loss;
    if (!un.energies.empty()) rec.e_init_mean = mean_of(un.energies.front());
    for (const auto& l : un.step_losses) rec.step_losses.push_back(l.item());
    {
        NoGradGuard no_grad;
        const auto e_final = model_.energy(batch.context, y.detach(), schedule.n_real);
        rec.e_final_mean = mean_of(e_final);
        if (schedule.n_real == 0) rec.e_init_mean = rec.e_final_mean;
    }
    rec.loss = loss.item();

    const auto& params = optimizer_.params();
    std::vector<Tensor> wrt;
    wrt.reserve(params.size());
    for (const auto& p : params) wrt.push_back(*p.slot);
    auto grads = grad(loss, wrt);
    rec.grad_norm = clip_global_norm(grads, cfg_.grad_clip);
    if (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm)) {
        double lo = alpha_eff.data()[0], hi = lo;
        for (double a : alpha_eff.data()) lo = std::min(lo, a), hi = std::max(hi, a);
        std::ostringstream msg;
        msg << "non-finite training loss at step " << step_ << ": loss=" << rec.loss << " grad_norm=" << rec.grad_norm
            << " alpha_eff in [" << lo << ", " << hi << "] n_real=" << schedule.n_real;
        throw InstabilityError(msg.str(), step_, rec.grad_norm);
    }
    rec.clipped_grad_norm = global_norm(grads);
    rec.lr = lr_at(std::min(step_ + 1, cfg_.total_steps), cfg_);
    optimizer_.step(grads, rec.lr);

    if (mcfg.replay_buffer_enabled) {
        const auto final_y = y.detach();
        for (std::int64_t i = 0; i < b; ++i) {
            const auto ex = batch.row(i);
            replay_.push({ex.ids[0], ex, o::slice(final_y, 0, i, i + 1), prior[i] + schedule.n_real});
        }
    }
    double traj = 0.0, replayed_traj = 0.0;
    for (auto p : prior) {
        traj += static_cast<double>(p + schedule.n_real);
        if (p > 0) replayed_traj += static_cast<double>(p + schedule.n_real);
    }
    rec.mean_trajectory = traj / static_cast<double>(b);
    if (replayed > 0) rec.replayed_trajectory = replayed_traj / static_cast<double>(replayed);
    rec.replayed_rows = replayed;

    nfe_cum_ += schedule.n_real;
    if (schedule.n_real > 0) {
        flops_cum_ += harness::flops_ebt_per_token(static_cast<double>(model_.nonembedding_parameter_count()),
                                                   schedule.n_real) *
                      static_cast<double>(b * s);
    }
    rec.n_real = schedule.n_real;
    rec.nfe_cum = nfe_cum_;
    rec.flops_cum = flops_cum_;
    rec.alpha = model_.alpha_value();
    ++step_;
    return rec;
}

}  // namespace ebt::train
