#include "ebt/harness/run.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ebt/autodiff/ops.hpp"
#include "ebt/errors.hpp"
#include "ebt/harness/flops.hpp"
#include "ebt/model/checkpoint.hpp"
#include "ebt/tasks/corpus.hpp"
#include "ebt/tasks/metrics.hpp"

namespace ebt::harness {

namespace o = ebt::ops;
namespace fs = std::filesystem;
using ini::format_double;
using train::TrainBatch;

namespace {

class PrecisionScope {
public:
    explicit PrecisionScope(Precision p) : previous_(precision()) { set_precision(p); }
    ~PrecisionScope() { set_precision(previous_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    Precision previous_;
};

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::Copy;
    if (s == "ngram") return TaskKind::Ngram;
    if (s == "dyck") return TaskKind::Dyck;
    if (s == "sinusoid") return TaskKind::Sinusoid;
    if (s == "denoise") return TaskKind::Denoise;
    throw ConfigError("unknown task '" + s + "'");
}

tasks::CorpusKind corpus_kind(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return tasks::CorpusKind::Copy;
        case TaskKind::Ngram: return tasks::CorpusKind::Ngram;
        case TaskKind::Dyck: return tasks::CorpusKind::Dyck;
        default: throw ContractViolation("task " + to_string(k) + " is not a symbol corpus");
    }
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
    const auto v = ini::parse_int(key, value);
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::uint64_t>(v);
}

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
    throw ConfigError("unknown key '" + key + "' in [" + section + "]");
}

/// Rows [first, first+count) of a [N, S, F] tensor, wrapping.
Tensor take_sequences(const Tensor& all, std::int64_t first, std::int64_t count) {
    const auto n = all.dim(0), row = all.dim(1) * all.dim(2);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count * row));
    for (std::int64_t i = 0; i < count; ++i) {
        const auto r = (first + i) % n;
        out.insert(out.end(), all.data().begin() + r * row, all.data().begin() + (r + 1) * row);
    }
    return Tensor::from_data({count, all.dim(1), all.dim(2)}, std::move(out));
}

TrainBatch sequence_batch(const Tensor& seqs, std::int64_t first_id) {
    const auto b = seqs.dim(0), s = seqs.dim(1);
    TrainBatch out;
    out.context = Context::from_features(o::slice(seqs, 1, 0, s - 1));
    out.target_features = o::slice(seqs, 1, 1, s);
    for (std::int64_t i = 0; i < b; ++i) out.ids.push_back(first_id + i);
    return out;
}

thinking::ThinkOptions think_options(const EvalSpec& e, std::int64_t steps, std::uint64_t seed) {
    thinking::ThinkOptions t;
    t.steps = steps;
    t.sigma = e.sigma;
    t.randomize_alpha = e.randomize_alpha;
    if (e.early_stop_tol > 0.0) t.early_stop_tol = e.early_stop_tol;
    t.seed = seed;
    t.parallel = e.parallel;
    return t;
}

thinking::ThinkOptions baseline_options(std::int64_t steps, std::uint64_t seed) {
    thinking::ThinkOptions t;
    t.steps = steps;
    t.seed = seed;
    return t;
}

struct Accumulator {
    const TaskData& data;
    const train::TrainConfig& tc;
    double loss_sum = 0.0, weight_sum = 0.0;
    double psnr_sum = 0.0, psnr_noised_sum = 0.0, mse_sum = 0.0, mse_pixel_sum = 0.0;
    std::int64_t images = 0;

    void add(const Tensor& prediction, const TrainBatch& batch) {
        const auto& spec = data.spec();
        const auto n = batch.batch() * batch.length();
        if (spec.discrete()) {
            const auto ce = tasks::cross_entropy_per_position(prediction, batch.targets);
            for (std::int64_t p = 0; p < n; ++p) {
                const double w = batch.weights.empty() ? 1.0 : batch.weights[static_cast<std::size_t>(p)];
                loss_sum += w * ce.data()[static_cast<std::size_t>(p)];
                weight_sum += w;
            }
            return;
        }
        const double l = train::task_loss(tc, prediction, batch).item();
        loss_sum += l * static_cast<double>(n);
        weight_sum += static_cast<double>(n);
        if (spec.kind != TaskKind::Denoise) return;

        const auto clamped = o::clamp(prediction, 0.0, 1.0);
        const auto out = data.images_from_patches(clamped);
        const auto clean = data.images_from_patches(batch.target_features);
        const auto noised = data.images_from_patches(batch.initial);
        for (std::size_t i = 0; i < out.size(); ++i) {
            psnr_sum += tasks::psnr(out[i], clean[i]);
            psnr_noised_sum += tasks::psnr(noised[i], clean[i]);
            mse_sum += tasks::mse(out[i], clean[i]);
            mse_pixel_sum += tasks::mse_pixel(out[i], clean[i]);
            ++images;
        }
    }

    EvalMetrics finish(std::int64_t nfe) const {
        EvalMetrics m;
        EBT_REQUIRE(weight_sum > 0.0, "evaluation saw no scored positions");
        m.loss = loss_sum / weight_sum;
        m.perplexity = data.spec().discrete() ? std::exp(m.loss) : 0.0;
        if (images > 0) {
            const double k = static_cast<double>(images);
            m.psnr = psnr_sum / k;
            m.psnr_noised = psnr_noised_sum / k;
            m.mse = mse_sum / k;
            m.mse_pixel = mse_pixel_sum / k;
        }
        m.nfe = nfe;
        m.positions = static_cast<std::int64_t>(weight_sum);
        return m;
    }
};

nlohmann::json metrics_json(const EvalMetrics& m) {
    return {{"loss", m.loss},           {"perplexity", m.perplexity}, {"psnr", m.psnr},
            {"psnr_noised", m.psnr_noised}, {"mse", m.mse},           {"mse_pixel", m.mse_pixel},
            {"nfe", m.nfe},             {"positions", m.positions}};
}

}  // namespace

std::string to_string(ModelKind k) { return k == ModelKind::Ebt ? "ebt" : "ff"; }

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Ngram: return "ngram";
        case TaskKind::Dyck: return "dyck";
        case TaskKind::Sinusoid: return "sinusoid";
        case TaskKind::Denoise: return "denoise";
    }
    return "?";
}

std::int64_t TaskSpec::feature_dim() const {
    if (kind == TaskKind::Sinusoid) return features;
    if (kind == TaskKind::Denoise) return patch * patch;
    return 0;
}

void TaskSpec::validate() const {
    const auto fail = [](const std::string& m) { throw ConfigError("task: " + m); };
    if (train_count < 1 || validation_count < 1) fail("split sizes must be >= 1");
    if (discrete()) {
        if (vocab_size < 2 || vocab_size > tasks::kMaxVocab) fail("vocab_size must be in [2, 64]");
        if (length < 2 || length > tasks::kMaxLength) fail("length must be in [2, 64]");
        if (kind == TaskKind::Copy && length % 2 != 0) fail("copy sequences need an even length");
    } else if (kind == TaskKind::Sinusoid) {
        if (length < 2) fail("length must be >= 2");
        if (features < 1) fail("features must be >= 1");
    } else {
        if (patch < 1 || image_size < patch || image_size % patch != 0) fail("image_size must be a multiple of patch");
        if (!(sigma > 0.0 && sigma <= 1.0) || !(eval_sigma > 0.0 && eval_sigma <= 1.0)) fail("sigma must be in (0, 1]");
        if (schedule_steps < 2) fail("schedule_steps must be >= 2");
    }
}

void TaskSpec::write(ini::Section& s) const {
    s.set("kind", to_string(kind));
    s.set("vocab_size", std::to_string(vocab_size));
    s.set("length", std::to_string(length));
    s.set("train_count", std::to_string(train_count));
    s.set("validation_count", std::to_string(validation_count));
    s.set("bracket_types", std::to_string(bracket_types));
    s.set("max_depth", std::to_string(max_depth));
    s.set("chain_seed", std::to_string(chain_seed));
    s.set("features", std::to_string(features));
    s.set("image_size", std::to_string(image_size));
    s.set("patch", std::to_string(patch));
    s.set("sigma", format_double(sigma));
    s.set("eval_sigma", format_double(eval_sigma));
    s.set("schedule_steps", std::to_string(schedule_steps));
}

TaskSpec TaskSpec::read(const ini::Section& s) {
    TaskSpec t;
    for (const auto& [key, value] : s.entries) {
        if (key == "kind") t.kind = task_kind_from_string(value);
        else if (key == "vocab_size") t.vocab_size = ini::parse_int(key, value);
        else if (key == "length") t.length = ini::parse_int(key, value);
        else if (key == "train_count") t.train_count = ini::parse_int(key, value);
        else if (key == "validation_count") t.validation_count = ini::parse_int(key, value);
        else if (key == "bracket_types") t.bracket_types = ini::parse_int(key, value);
        else if (key == "max_depth") t.max_depth = ini::parse_int(key, value);
        else if (key == "chain_seed") t.chain_seed = parse_seed(key, value);
        else if (key == "features") t.features = ini::parse_int(key, value);
        else if (key == "image_size") t.image_size = ini::parse_int(key, value);
        else if (key == "patch") t.patch = ini::parse_int(key, value);
        else if (key == "sigma") t.sigma = ini::parse_double(key, value);
        else if (key == "eval_sigma") t.eval_sigma = ini::parse_double(key, value);
        else if (key == "schedule_steps") t.schedule_steps = ini::parse_int(key, value);
        else unknown_key("task", key);
    }
    return t;
}

void EvalSpec::validate() const {
    const auto fail = [](const std::string& m) { throw ConfigError("eval: " + m); };
    if (steps < 0) fail("steps must be >= 0");
    if (candidates < 1) fail("candidates must be >= 1");
    if (sigma < 0.0) fail("sigma must be >= 0");
    if (early_stop_tol < 0.0) fail("early_stop_tol must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
}

void EvalSpec::write(ini::Section& s) const {
    s.set("steps", std::to_string(steps));
    s.set("candidates", std::to_string(candidates));
    s.set("sigma", format_double(sigma));
    s.set("randomize_alpha", randomize_alpha ? "true" : "false");
    s.set("early_stop_tol", format_double(early_stop_tol));
    s.set("batch_size", std::to_string(batch_size));
    s.set("parallel", parallel ? "true" : "false");
}

EvalSpec EvalSpec::read(const ini::Section& s) {
    EvalSpec e;
    for (const auto& [key, value] : s.entries) {
        if (key == "steps") e.steps = ini::parse_int(key, value);
        else if (key == "candidates") e.candidates = ini::parse_int(key, value);
        else if (key == "sigma") e.sigma = ini::parse_double(key, value);
        else if (key == "randomize_alpha") e.randomize_alpha = ini::parse_bool(key, value);
        else if (key == "early_stop_tol") e.early_stop_tol = ini::parse_double(key, value);
        else if (key == "batch_size") e.batch_size = ini::parse_int(key, value);
        else if (key == "parallel") e.parallel = ini::parse_bool(key, value);
        else unknown_key("eval", key);
    }
    return e;
}

void RunConfig::validate() const {
    task.validate();
    model.validate();
    train.validate();
    eval.validate();
    const auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (name.empty()) fail("run name must not be empty");
    if (task.discrete()) {
        if (model.modality != Modality::Discrete) fail("symbol tasks need a discrete model");
        if (model.vocab_size != task.vocab_size) {
            fail("model vocab_size " + std::to_string(model.vocab_size) + " differs from task vocab_size " +
                 std::to_string(task.vocab_size));
        }
        if (train.loss != train::LossKind::CrossEntropy) fail("symbol tasks train with cross_entropy");
    } else {
        if (model.modality != Modality::Continuous) fail("task " + to_string(task.kind) + " needs a continuous model");
        if (model.feature_dim != task.feature_dim()) {
            fail("model feature_dim " + std::to_string(model.feature_dim) + " differs from the task's " +
                 std::to_string(task.feature_dim()));
        }
        if (train.loss == train::LossKind::CrossEntropy) fail("continuous tasks need smooth_l1 or mse loss");
    }
    if (task.kind == TaskKind::Denoise && model.architecture != Architecture::Bidirectional) {
        fail("denoising needs a bidirectional model");
    }
    if (task.kind != TaskKind::Denoise && model.architecture != Architecture::Causal) {
        fail("next-element tasks need a causal model");
    }
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

ini::Document RunConfig::to_ini() const {
    ini::Document doc;
    auto& run = doc.section("run");
    run.set("name", name);
    run.set("model", to_string(model_kind));
    run.set("seed", std::to_string(seed));
    run.set("out", out_dir);
    run.set("precision", precision == Precision::F32 ? "32" : "64");
    run.set("checkpoint_every", std::to_string(checkpoint_every));
    task.write(doc.section("task"));
    model.write(doc.section("model"));
    train.write(doc.section("train"));
    eval.write(doc.section("eval"));
    return doc;
}

RunConfig RunConfig::from_ini(const ini::Document& doc) {
    RunConfig c;
    for (const auto& s : doc.sections) {
        if (s.name == "run" || s.name == "task" || s.name == "model" || s.name == "train" || s.name == "eval") continue;
        throw ConfigError("unknown section [" + s.name + "]");
    }
    if (const auto* run = doc.find("run")) {
        for (const auto& [key, value] : run->entries) {
            if (key == "name") c.name = value;
            else if (key == "model") {
                if (value == "ebt") c.model_kind = ModelKind::Ebt;
                else if (value == "ff") c.model_kind = ModelKind::Feedforward;
                else throw ConfigError("model must be ebt or ff, got '" + value + "'");
            } else if (key == "seed") c.seed = parse_seed(key, value);
            else if (key == "out") c.out_dir = value;
            else if (key == "precision") {
                if (value == "64") c.precision = Precision::F64;
                else if (value == "32") c.precision = Precision::F32;
                else throw ConfigError("precision must be 32 or 64, got '" + value + "'");
            } else if (key == "checkpoint_every") c.checkpoint_every = ini::parse_int(key, value);
            else unknown_key("run", key);
        }
    }
    if (const auto* s = doc.find("task")) c.task = TaskSpec::read(*s);
    if (const auto* s = doc.find("model")) c.model = EBTConfig::read(*s);
    if (const auto* s = doc.find("train")) c.train = train::TrainConfig::read(*s);
    if (const auto* s = doc.find("eval")) c.eval = EvalSpec::read(*s);
    return c;
}

std::string RunConfig::serialize() const { return ini::serialize(to_ini()); }

RunConfig RunConfig::parse(const std::string& text) { return from_ini(ini::parse(text)); }

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config '" + path + "'");
    out << serialize();
}

std::int64_t training_steps(const EBTConfig& cfg) { return cfg.randomize_steps ? cfg.max_steps : cfg.num_steps; }

TaskData::TaskData(const TaskSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    spec_.validate();
    if (spec_.discrete()) {
        tasks::CorpusOptions opts;
        opts.dyck.bracket_types = spec_.bracket_types;
        opts.dyck.max_depth = spec_.max_depth;
        opts.chain_seed = spec_.chain_seed;
        auto splits = tasks::make_splits(corpus_kind(spec_.kind), spec_.vocab_size, spec_.length, spec_.train_count,
                                         spec_.validation_count, seed, opts);
        train_corpus_ = std::move(splits.train);
        validation_corpus_ = std::move(splits.validation);
    } else if (spec_.kind == TaskKind::Sinusoid) {
        train_sequences_ = tasks::gen_sinusoids(spec_.train_count, spec_.length, spec_.features, derive_seed(seed, 1));
        validation_sequences_ =
            tasks::gen_sinusoids(spec_.validation_count, spec_.length, spec_.features, derive_seed(seed, 2));
    } else {
        train_images_ = tasks::procedural_textures(spec_.train_count, spec_.image_size, derive_seed(seed, 1));
        validation_images_ = tasks::procedural_textures(spec_.validation_count, spec_.image_size, derive_seed(seed, 2));
        schedule_ = tasks::make_schedule(spec_.schedule_steps);
    }
}

std::int64_t TaskData::validation_size() const {
    if (spec_.discrete()) return validation_corpus_.size();
    if (spec_.kind == TaskKind::Sinusoid) return validation_sequences_.dim(0);
    return static_cast<std::int64_t>(validation_images_.size());
}

TrainBatch TaskData::denoise_batch(const std::vector<tasks::Image>& clean, double sigma_fraction,
                                   std::uint64_t noise_seed, std::int64_t first_id) const {
    Rng rng(noise_seed);
    std::vector<tasks::Image> noised;
    noised.reserve(clean.size());
    for (const auto& img : clean) noised.push_back(tasks::apply_noise(img, sigma_fraction, schedule_, rng).noised);
    TrainBatch b;
    const auto input = tasks::to_patches(noised, spec_.patch);
    b.context = Context::from_features(input);
    b.initial = input;
    b.target_features = tasks::to_patches(clean, spec_.patch);
    for (std::size_t i = 0; i < clean.size(); ++i) b.ids.push_back(first_id + static_cast<std::int64_t>(i));
    return b;
}

TrainBatch TaskData::train_batch(std::int64_t step, std::int64_t batch_size) const {
    EBT_REQUIRE(step >= 0 && batch_size >= 1, "batch index and size must be valid");
    const auto first = step * batch_size;
    if (spec_.discrete()) {
        std::vector<std::int64_t> rows;
        for (std::int64_t i = 0; i < batch_size; ++i) rows.push_back((first + i) % train_corpus_.size());
        auto b = train::token_batch(tasks::make_batch(train_corpus_, rows));
        b.ids = rows;
        return b;
    }
    if (spec_.kind == TaskKind::Sinusoid) {
        auto b = sequence_batch(take_sequences(train_sequences_, first, batch_size), 0);
        for (std::int64_t i = 0; i < batch_size; ++i) b.ids[static_cast<std::size_t>(i)] = (first + i) % train_sequences_.dim(0);
        return b;
    }
    std::vector<tasks::Image> clean;
    const auto n = static_cast<std::int64_t>(train_images_.size());
    for (std::int64_t i = 0; i < batch_size; ++i) clean.push_back(train_images_[static_cast<std::size_t>((first + i) % n)]);
    // Fresh noise every step, so ids never repeat and replay cannot pair a stale noisy context.
    return denoise_batch(clean, spec_.sigma, derive_seed(derive_seed(seed_, 3), static_cast<std::uint64_t>(step)), first);
}

std::vector<TrainBatch> TaskData::validation(std::int64_t batch_size, std::optional<double> sigma_fraction) const {
    EBT_REQUIRE(batch_size >= 1, "batch size must be >= 1");
    std::vector<TrainBatch> out;
    const auto total = validation_size();
    for (std::int64_t first = 0, chunk = 0; first < total; first += batch_size, ++chunk) {
        const auto count = std::min(batch_size, total - first);
        if (spec_.discrete()) {
            auto b = train::token_batch(tasks::make_batch(validation_corpus_, first, count), first);
            out.push_back(std::move(b));
        } else if (spec_.kind == TaskKind::Sinusoid) {
            out.push_back(sequence_batch(take_sequences(validation_sequences_, first, count), first));
        } else {
            const std::vector<tasks::Image> clean(validation_images_.begin() + first,
                                                  validation_images_.begin() + first + count);
            out.push_back(denoise_batch(clean, sigma_fraction.value_or(spec_.eval_sigma),
                                        derive_seed(derive_seed(seed_, 4), static_cast<std::uint64_t>(chunk)), first));
        }
    }
    return out;
}

std::vector<tasks::Image> TaskData::images_from_patches(const Tensor& patches) const {
    EBT_REQUIRE(spec_.kind == TaskKind::Denoise, "only the denoising task has images");
    return tasks::from_patches(patches, spec_.image_size, spec_.image_size, 1, spec_.patch);
}

EvalMetrics evaluate(const EbtModel& model, const TaskData& data, const std::vector<TrainBatch>& batches,
                     const thinking::ThinkOptions& opts, std::int64_t candidates, const train::TrainConfig& tc,
                     nlohmann::json* traces) {
    Accumulator acc{data, tc};
    std::int64_t nfe = 0;
    if (traces) *traces = nlohmann::json::array();
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const auto& batch = batches[i];
        auto o1 = opts;
        o1.seed = derive_seed(opts.seed, i);
        if (batch.initial.defined()) o1.initial = batch.initial;
        const auto r = thinking::self_verify(model, batch.context, o1, candidates);
        acc.add(r.prediction, batch);
        nfe = std::max(nfe, r.trace.nfe);
        if (traces) {
            for (auto& row : thinking::trace_to_json(r.trace, batch.context, batch.ids.empty() ? 0 : batch.ids[0])) {
                traces->push_back(std::move(row));
            }
        }
    }
    return acc.finish(nfe);
}

EvalMetrics evaluate(const FeedForwardModel& model, const TaskData& data, const std::vector<TrainBatch>& batches,
                     const train::TrainConfig& tc) {
    Accumulator acc{data, tc};
    NoGradGuard guard;
    for (const auto& batch : batches) acc.add(model.forward(batch.context), batch);
    return acc.finish(1);
}

TrainResult run_train(const RunConfig& cfg) {
    cfg.validate();
    PrecisionScope scope(cfg.precision);
    fs::create_directories(cfg.out_dir);
    cfg.save((fs::path(cfg.out_dir) / "config.ini").string());

    TrainResult result;
    result.metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.ebt").string();
    std::ofstream csv_file(result.metrics_path);
    if (!csv_file) throw ConfigError("cannot write '" + result.metrics_path + "'");
    train::MetricsCsv csv(csv_file);

    const TaskData data(cfg.task, derive_seed(cfg.seed, 1));
    const auto validation = data.validation(cfg.eval.batch_size, cfg.task.sigma);
    const auto step_checkpoint = [&](std::int64_t k) {
        return (fs::path(cfg.out_dir) / ("checkpoint_step" + std::to_string(k) + ".ebt")).string();
    };

    const auto run_loop = [&](auto& trainer, auto& model) {
        for (std::int64_t k = 0; k < cfg.train.total_steps; ++k) {
            auto rec = trainer.step(data.train_batch(k, cfg.train.batch_size));
            csv.append(rec);
            result.history.push_back(rec);
            if (cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0) model.save(step_checkpoint(k + 1));
        }
        csv_file.flush();
        model.save(result.checkpoint_path);
        result.nonembedding_params = model.nonembedding_parameter_count();
    };

    if (cfg.model_kind == ModelKind::Ebt) {
        EbtModel model(cfg.model, derive_seed(cfg.seed, 0));
        train::Trainer trainer(model, cfg.train, derive_seed(cfg.seed, 2));
        run_loop(trainer, model);
        result.validation = evaluate(model, data, validation,
                                     baseline_options(training_steps(cfg.model), derive_seed(cfg.seed, 3)), 1, cfg.train);
    } else {
        FeedForwardModel model(cfg.model, derive_seed(cfg.seed, 0));
        FeedForwardTrainer trainer(model, cfg.train);
        run_loop(trainer, model);
        result.validation = evaluate(model, data, validation, cfg.train);
    }
    if (!result.history.empty()) result.final_record = result.history.back();
    return result;
}

nlohmann::json EvalReport::to_json() const {
    return {{"steps", steps},
            {"candidates", candidates},
            {"metrics", metrics_json(metrics)},
            {"baseline", metrics_json(baseline)},
            {"stt", {{"baseline_metric", stt.baseline_metric}, {"metric_at_f", stt.metric_at_f}, {"stt", stt.stt}}}};
}

EvalReport run_eval(const std::string& checkpoint, const RunConfig& cfg, std::int64_t steps, std::int64_t candidates) {
    cfg.task.validate();
    cfg.eval.validate();
    PrecisionScope scope(cfg.precision);
    const auto kind = read_checkpoint(checkpoint).kind;
    const TaskData data(cfg.task, derive_seed(cfg.seed, 1));
    const auto batches = data.validation(cfg.eval.batch_size);
    const auto check_model = [&](const EBTConfig& m) {
        RunConfig probe = cfg;
        probe.model = m;
        probe.validate();
    };

    EvalReport report;
    if (kind == "ff") {
        const auto model = FeedForwardModel::load(checkpoint);
        check_model(model->config());
        report.metrics = report.baseline = evaluate(*model, data, batches, cfg.train);
        report.steps = report.candidates = 1;
    } else {
        const auto model = EbtModel::load(checkpoint);
        check_model(model->config());
        const auto train_n = training_steps(model->config());
        report.steps = steps > 0 ? steps : (cfg.eval.steps > 0 ? cfg.eval.steps : train_n);
        report.candidates = candidates > 0 ? candidates : cfg.eval.candidates;
        const auto seed = derive_seed(cfg.seed, 3);
        report.metrics = evaluate(*model, data, batches, think_options(cfg.eval, report.steps, seed), report.candidates,
                                  cfg.train, &report.traces);
        report.baseline = evaluate(*model, data, batches, baseline_options(train_n, seed), 1, cfg.train);
    }
    report.stt = cfg.task.kind == TaskKind::Denoise
                     ? thinking::stt(report.baseline.psnr, report.metrics.psnr, true)
                     : thinking::stt(report.baseline.loss, report.metrics.loss, false);
    return report;
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::Width: return "width";
        case SweepAxis::Depth: return "depth";
        case SweepAxis::Data: return "data";
        case SweepAxis::Steps: return "steps";
    }
    return "?";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "width") return SweepAxis::Width;
    if (s == "depth") return SweepAxis::Depth;
    if (s == "data") return SweepAxis::Data;
    if (s == "steps") return SweepAxis::Steps;
    throw ConfigError("unknown sweep axis '" + s + "' (width, depth, data, steps)");
}

std::string SweepReport::csv() const {
    std::string out = "axis,value,status,final_loss,validation_loss,nonembedding_params,flops,batch_size\n";
    for (const auto& p : points) {
        out += to_string(axis) + "," + format_double(p.value) + "," + (p.ok ? "ok" : "failed") + ",";
        out += p.ok ? format_double(p.final_record.loss) + "," + format_double(p.validation_loss) + "," +
                          std::to_string(p.nonembedding_params) + "," + format_double(p.flops) + "," +
                          std::to_string(p.batch_size)
                    : ",,,,";
        out += "\n";
    }
    return out;
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    EBT_REQUIRE(x.size() == y.size(), "slope fit needs paired points");
    EBT_REQUIRE(x.size() >= 2, "slope fit needs at least two points");
    double mx = 0, my = 0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        EBT_REQUIRE(x[i] > 0 && y[i] > 0, "log-log fit needs positive values");
        mx += std::log(x[i]) / n;
        my += std::log(y[i]) / n;
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    EBT_REQUIRE(sxx > 0, "slope fit needs at least two distinct x values");
    return sxy / sxx;
}

SweepReport run_sweep(SweepAxis axis, const std::vector<double>& grid, const RunConfig& base, bool sqrt_batch) {
    EBT_REQUIRE(grid.size() >= 3, "a sweep needs at least three grid points");
    const auto base_params = sqrt_batch ? EbtModel(base.model, 0).nonembedding_parameter_count() : 0;
    SweepReport report;
    report.axis = axis;
    std::vector<double> xs, ys;
    for (double value : grid) {
        SweepPoint point;
        point.value = value;
        RunConfig c = base;
        const auto v = static_cast<std::int64_t>(std::llround(value));
        switch (axis) {
            case SweepAxis::Width: c.model.embed_dim = v; break;
            case SweepAxis::Depth: c.model.layers = v; break;
            case SweepAxis::Data: c.task.train_count = v; break;
            case SweepAxis::Steps:
                c.train.total_steps = v;
                c.train.warmup_steps = std::min(c.train.warmup_steps, v);
                break;
        }
        c.name = base.name + "_" + to_string(axis) + "_" + std::to_string(v);
        point.batch_size = c.train.batch_size;
        c.out_dir = (fs::path(base.out_dir) / (to_string(axis) + "_" + std::to_string(v))).string();
        try {
            if (sqrt_batch) {
                const auto n = EbtModel(c.model, 0).nonembedding_parameter_count();
                const double scale = std::sqrt(static_cast<double>(n) / static_cast<double>(base_params));
                c.train.batch_size = std::max<std::int64_t>(1, std::llround(static_cast<double>(base.train.batch_size) * scale));
                point.batch_size = c.train.batch_size;
            }
            const auto r = run_train(c);
            point.ok = true;
            point.final_record = r.final_record;
            point.validation_loss = r.validation.loss;
            point.nonembedding_params = r.nonembedding_params;
            point.flops = r.final_record.flops_cum;
            xs.push_back(value);
            ys.push_back(point.validation_loss);
        } catch (const std::exception& e) {
            point.error = e.what();
            report.partial = true;
        }
        report.points.push_back(std::move(point));
    }
    if (xs.size() >= 2) report.slope = fit_loglog_slope(xs, ys);
    else report.partial = true;
    return report;
}

}  // namespace ebt::harness

namespace ebt::harness {

MeasuredFlops measure_training_flops(const RunConfig& cfg) {
    cfg.validate();
    PrecisionScope scope(cfg.precision);
    const TaskData data(cfg.task, derive_seed(cfg.seed, 1));
    const auto batch = data.train_batch(0, cfg.train.batch_size);
    const auto tokens = static_cast<double>(batch.batch() * batch.length());
    MeasuredFlops m;
    if (cfg.model_kind == ModelKind::Ebt) {
        EbtModel model(cfg.model, derive_seed(cfg.seed, 0));
        train::Trainer trainer(model, cfg.train, derive_seed(cfg.seed, 2));
        Rng rng(derive_seed(cfg.seed, 2));
        auto schedule = train::draw_schedule(cfg.model, batch.batch(), batch.length(), rng);
        schedule.n_real = training_steps(cfg.model);
        m.nonembedding_params = model.nonembedding_parameter_count();
        m.formula_per_token = flops_ebt_per_token(static_cast<double>(m.nonembedding_params), schedule.n_real);
        const auto before = ops::matmul_flops();
        trainer.step(batch, schedule);
        m.per_token = static_cast<double>(ops::matmul_flops() - before) / tokens;
    } else {
        FeedForwardModel model(cfg.model, derive_seed(cfg.seed, 0));
        FeedForwardTrainer trainer(model, cfg.train);
        m.nonembedding_params = model.nonembedding_parameter_count();
        m.formula_per_token = flops_ff_per_token(static_cast<double>(m.nonembedding_params));
        const auto before = ops::matmul_flops();
        trainer.step(batch);
        m.per_token = static_cast<double>(ops::matmul_flops() - before) / tokens;
    }
    return m;
}

}  // namespace ebt::harness
