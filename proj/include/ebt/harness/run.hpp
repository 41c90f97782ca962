#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebt/autodiff/tensor.hpp"
#include "ebt/harness/baseline.hpp"
#include "ebt/model/config.hpp"
#include "ebt/tasks/images.hpp"
#include "ebt/think/think.hpp"
#include "ebt/train/trainer.hpp"
#include "ebt/util/ini.hpp"

namespace ebt::harness {

enum class ModelKind { Ebt, Feedforward };
enum class TaskKind { Copy, Ngram, Dyck, Sinusoid, Denoise };

std::string to_string(ModelKind kind);
std::string to_string(TaskKind kind);

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    std::int64_t vocab_size = 16;
    std::int64_t length = 16;
    std::int64_t train_count = 4096;
    std::int64_t validation_count = 256;
    std::int64_t bracket_types = 2;  // dyck
    std::int64_t max_depth = 4;      // dyck
    std::uint64_t chain_seed = 1234;  // ngram
    std::int64_t features = 4;       // sinusoid
    std::int64_t image_size = 32;    // denoise
    std::int64_t patch = 4;          // denoise
    double sigma = 0.1;              // denoise, training noise fraction
    double eval_sigma = 0.1;         // denoise, evaluation noise fraction
    std::int64_t schedule_steps = 1000;

    bool discrete() const { return kind == TaskKind::Copy || kind == TaskKind::Ngram || kind == TaskKind::Dyck; }
    /// Features per prediction for continuous tasks.
    std::int64_t feature_dim() const;
    void validate() const;
    void write(ini::Section& s) const;
    static TaskSpec read(const ini::Section& s);
};

struct EvalSpec {
    std::int64_t steps = 0;  // 0: the training step count
    std::int64_t candidates = 1;
    double sigma = 0.0;
    bool randomize_alpha = false;
    double early_stop_tol = 0.0;  // 0 disables early stopping
    std::int64_t batch_size = 64;
    bool parallel = false;

    void validate() const;
    void write(ini::Section& s) const;
    static EvalSpec read(const ini::Section& s);
};

/// Everything a run needs; a run is reproducible from this alone.
struct RunConfig {
    std::string name = "run";
    ModelKind model_kind = ModelKind::Ebt;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/run";
    Precision precision = Precision::F64;
    std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
    TaskSpec task;
    EBTConfig model;
    train::TrainConfig train;
    EvalSpec eval;

    /// Checks the parts against each other (modality, loss, feature widths).
    void validate() const;
    ini::Document to_ini() const;
    static RunConfig from_ini(const ini::Document& doc);
    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
};

/// Step count a model was trained with: the fixed N, or the largest drawn N.
std::int64_t training_steps(const EBTConfig& cfg);

/// Deterministic data source for a task.
class TaskData {
public:
    TaskData(const TaskSpec& spec, std::uint64_t seed);

    const TaskSpec& spec() const { return spec_; }
    /// Training batch for iteration `step`; the same (step, size) always gives the same batch.
    train::TrainBatch train_batch(std::int64_t step, std::int64_t batch_size) const;
    /// The full validation split in batches. Denoising uses `sigma_fraction`
    /// (the spec's eval_sigma when unset).
    std::vector<train::TrainBatch> validation(std::int64_t batch_size,
                                              std::optional<double> sigma_fraction = std::nullopt) const;
    std::int64_t validation_size() const;

    /// Reassembles [B, P, patch²] patches into images.
    std::vector<tasks::Image> images_from_patches(const Tensor& patches) const;

private:
    train::TrainBatch denoise_batch(const std::vector<tasks::Image>& clean, double sigma_fraction,
                                    std::uint64_t noise_seed, std::int64_t first_id) const;

    TaskSpec spec_;
    std::uint64_t seed_;
    tasks::ToyCorpus train_corpus_, validation_corpus_;
    Tensor train_sequences_, validation_sequences_;  // sinusoid [N, S, F]
    std::vector<tasks::Image> train_images_, validation_images_;
    tasks::NoiseSchedule schedule_;
};

struct EvalMetrics {
    double loss = 0.0;  // task loss: weighted CE, smooth-L1 or MSE
    double perplexity = 0.0;
    double psnr = 0.0;         // denoise: denoised vs clean
    double psnr_noised = 0.0;  // denoise: noised input vs clean
    double mse = 0.0;          // denoise, [0, 1] scale
    double mse_pixel = 0.0;    // denoise, [0, 255] scale
    std::int64_t nfe = 0;      // per prediction
    std::int64_t positions = 0;
};

/// Scores an EBT with thinking settings over batches. Returns the traces when asked.
EvalMetrics evaluate(const EbtModel& model, const TaskData& data, const std::vector<train::TrainBatch>& batches,
                     const thinking::ThinkOptions& opts, std::int64_t candidates, const train::TrainConfig& tc,
                     nlohmann::json* traces = nullptr);
EvalMetrics evaluate(const FeedForwardModel& model, const TaskData& data,
                     const std::vector<train::TrainBatch>& batches, const train::TrainConfig& tc);

struct TrainResult {
    train::RunRecord final_record;
    std::vector<train::RunRecord> history;
    EvalMetrics validation;
    std::int64_t nonembedding_params = 0;
    std::string checkpoint_path;
    std::string metrics_path;
};

/// Trains per the config, writing config.ini, metrics.csv and checkpoints
/// into out_dir. Instability errors propagate.
TrainResult run_train(const RunConfig& cfg);

struct EvalReport {
    EvalMetrics metrics;
    EvalMetrics baseline;  // training N, one candidate
    thinking::SttReport stt;
    std::int64_t steps = 0;
    std::int64_t candidates = 1;
    nlohmann::json traces;

    nlohmann::json to_json() const;
};

/// Evaluates a checkpoint on the config's task. `steps`/`candidates` override the
/// config's eval section when positive.
EvalReport run_eval(const std::string& checkpoint, const RunConfig& cfg, std::int64_t steps = 0,
                    std::int64_t candidates = 0);

enum class SweepAxis { Width, Depth, Data, Steps };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& text);

struct SweepPoint {
    double value = 0.0;
    bool ok = false;
    std::string error;
    train::RunRecord final_record;
    double validation_loss = 0.0;
    std::int64_t nonembedding_params = 0;
    std::int64_t batch_size = 0;
    double flops = 0.0;  // total training FLOPs
};

struct SweepReport {
    SweepAxis axis = SweepAxis::Width;
    std::vector<SweepPoint> points;
    double slope = 0.0;  // d log(validation loss) / d log(axis value)
    bool partial = false;

    std::string csv() const;
};

/// Ordinary least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// One run per grid value, each in out_dir/<axis>_<value>. With `sqrt_batch`
/// the batch size scales with the square root of the non-embedding parameter
/// count relative to the base config.
SweepReport run_sweep(SweepAxis axis, const std::vector<double>& grid, const RunConfig& base, bool sqrt_batch = false);

struct MeasuredFlops {
    std::int64_t nonembedding_params = 0;
    double per_token = 0.0;          // counted matmul FLOPs of one training step, per token
    double formula_per_token = 0.0;  // 6N, or 20N per step
};

/// Counts the matmul FLOPs of one training step on a task batch (N fixed at
/// the training step count).
MeasuredFlops measure_training_flops(const RunConfig& cfg);

}  // namespace ebt::harness
