#pragma once

// Run configuration, training loop, inference pipeline and diagnostics
// shared by the command-line tool and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfdetr/data.hpp"
#include "pfdetr/diversity.hpp"
#include "pfdetr/feedback.hpp"
#include "pfdetr/matching.hpp"
#include "pfdetr/model.hpp"

namespace pfdetr {

/// Invalid configuration key or value.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or gradient during training.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    ModelConfig model;
    FeedbackConfig feedback;
    SyntheticSpec synth;
    SequenceMode mode = SequenceMode::Resize;
    std::size_t window = kWindowLength;
    std::size_t overlap = kWindowOverlap;

    std::size_t batch_size = 16;
    std::size_t epochs = 20;
    std::size_t warmup_epochs = 5;
    double lr = 5e-4;  ///< peak, reached at the end of warm-up
    double min_lr = 0.0;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;  ///< global-norm clip; 0 disables

    std::uint64_t seed = 0;
    /// Serial sample loop. When false, samples of a batch run concurrently
    /// and gradient accumulation order is unspecified.
    bool deterministic = true;
    bool stable = true;
    bool hybrid = true;
    bool two_stage = true;
    std::size_t hybrid_k = 3;
    double hybrid_weight = 1.0;

    std::string probe_dir;  ///< empty: probe drawn from the training set
    std::size_t probe_size = 8;
    std::size_t top_k = 100;
    std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};
    std::size_t diagnose_samples = 2;

    RunConfig();

    void validate() const;
    /// Model configuration with the hybrid toggle applied.
    ModelConfig model_config() const;
    ObjectiveOptions objective_options() const;
    SyntheticSpec synth_spec() const;

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();

    /// "key = value" lines in keys() order.
    std::string to_text() const;
    void apply_text(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static RunConfig load(const std::filesystem::path& path);
};

/// Learning rate at optimizer step `step` (0-based): linear warm-up to the
/// peak, then cosine annealing toward min_lr (reached one step past the end).
double learning_rate(const RunConfig& cfg, std::size_t step, std::size_t steps_per_epoch);

struct TrainingSample {
    std::size_t video = 0;
    SequenceWindow window;
    std::vector<GroundTruthAction> targets;
};

std::vector<TrainingSample> make_samples(const Dataset& data, const RunConfig& cfg);

/// Throws DataError when the dataset does not fit the configured model.
void check_compatible(const Dataset& data, const RunConfig& cfg);

struct EpochMetrics {
    std::size_t epoch = 0;  ///< 1-based
    double lr = 0.0;        ///< rate of the epoch's last step
    LossBreakdown loss;     ///< per-sample means
    double grad_norm = 0.0;  ///< mean pre-clip global norm per step
    double probe_map = 0.0;
    DiversityReport diversity;
};

std::vector<std::string> metrics_header(const ModelConfig& model);
std::string metrics_row(const EpochMetrics& m);

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    std::size_t best_epoch = 0;
};

struct TrainOptions {
    /// Directory for config.txt, metrics.csv, best.ckpt, final.ckpt; empty
    /// keeps everything in memory.
    std::filesystem::path out_dir;
    std::function<void(const EpochMetrics&)> on_epoch;
    /// Checked after each epoch; returning true ends training there.
    std::function<bool(const EpochMetrics&)> stop_after;
};

/// Trains `model` in place. The probe set (held-out when given) is scored
/// after every epoch for diversity and average mAP.
TrainResult train(DetrModel& model, const RunConfig& cfg, const Dataset& train_set,
                  const Dataset& probe_set, const TrainOptions& options = {});

/// Raw detections of one video: every (query, class) pair of the last
/// decoder layer over all windows, mapped to seconds.
std::vector<Detection> predict_video(const DetrModel& model, const VideoSample& video,
                                     const RunConfig& cfg);

/// predict_video over every video, then soft_nms and top_k.
std::vector<Detection> run_inference(const DetrModel& model, const std::vector<VideoSample>& videos,
                                     const RunConfig& cfg);

EvalReport evaluate_model(const DetrModel& model, const Dataset& data, const RunConfig& cfg,
                          std::vector<Detection>* detections = nullptr);

/// Window features of the first `count` videos (all when count is 0).
std::vector<Tensor> probe_features(const Dataset& data, const RunConfig& cfg, std::size_t count);

/// Writes diversity.csv and ATTN/PGM exports of the first diagnose_samples videos.
DiversityReport diagnose(const DetrModel& model, const Dataset& data, const RunConfig& cfg,
                         const std::filesystem::path& out_dir);

void save_diversity_csv(const DiversityReport& report, const std::filesystem::path& path);

/// Zeroes every query and key projection so that all attention maps are uniform.
void collapse_attention(DetrModel& model);

}  // namespace pfdetr
