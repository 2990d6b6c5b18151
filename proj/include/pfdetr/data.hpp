#pragma once

// Synthetic temporal-action data, feature/annotation files, inference
// post-processing and mAP evaluation.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfdetr/interval.hpp"
#include "pfdetr/matching.hpp"
#include "pfdetr/tensor.hpp"

namespace pfdetr {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Annotation {
    std::size_t label = 0;
    Interval seconds;
};

struct VideoSample {
    std::string id;
    Tensor features;  ///< T×D_in
    double duration = 0.0;
    std::vector<Annotation> annotations;
};

struct Dataset {
    std::vector<std::string> class_names;
    std::vector<VideoSample> videos;
};

struct SyntheticSpec {
    std::size_t videos = 8;
    std::size_t min_length = 192;
    std::size_t max_length = 192;
    std::size_t input_dim = 16;
    std::size_t classes = 3;
    std::size_t min_actions = 1;
    std::size_t max_actions = 3;
    double min_fraction = 0.05;  ///< action length as a fraction of the video
    double max_fraction = 0.25;
    double snr = 2.0;
    double seconds_per_step = 1.0;
    std::uint64_t seed = 0;
    /// Seeds the class signatures only, so that sets drawn with different
    /// seeds share the same classes.
    std::uint64_t signature_seed = 1;

    void validate() const;
};

/// Unit-variance Gaussian background plus snr·signature(class) over each
/// action span. Class signatures are orthonormal and depend only on
/// `signature_seed`. Actions never overlap.
Dataset synth_generate(const SyntheticSpec& spec);

/// Orthonormal class signatures (classes × dim) drawn from `seed`.
Tensor class_signatures(std::size_t classes, std::size_t dim, std::uint64_t seed);

enum class SequenceMode { Slice, Resize };

std::string to_string(SequenceMode m);
SequenceMode parse_sequence_mode(const std::string& s);

struct SequenceWindow {
    Tensor features;            ///< length × D_in
    double source_start = 0.0;  ///< in input steps
    double source_span = 0.0;   ///< input steps covered by normalized [0,1]
};

inline constexpr std::size_t kWindowLength = 192;
inline constexpr std::size_t kWindowOverlap = 48;

/// Slice: windows every (length − overlap) steps, the last one right-aligned
/// to the tail; short inputs are zero-padded. Resize: linear interpolation
/// to exactly `length` steps.
std::vector<SequenceWindow> prepare_sequence(const Tensor& features, SequenceMode mode,
                                             std::size_t length = kWindowLength,
                                             std::size_t overlap = kWindowOverlap);

/// Ground truths of `video` in the window's normalized time. In slice mode
/// an action is kept when at least half of it lies inside the window.
std::vector<GroundTruthAction> window_targets(const VideoSample& video,
                                              const SequenceWindow& window);

struct Detection {
    std::string video_id;
    Interval seconds;
    std::size_t label = 0;
    double score = 0.0;
};

inline constexpr double kSoftNmsThreshold = 0.40;

/// Linear SoftNMS per (video, class): detections overlapping the current
/// maximum with IoU > threshold have their score multiplied by (1 − IoU).
/// Returns every input detection, rescored, in selection order.
std::vector<Detection> soft_nms(std::vector<Detection> dets,
                                double iou_threshold = kSoftNmsThreshold);

/// The k best-scoring detections of each video.
std::vector<Detection> top_k(std::vector<Detection> dets, std::size_t k);

struct EvalReport {
    std::vector<std::string> class_names;
    std::vector<double> thresholds;
    std::vector<std::vector<double>> ap;  ///< [class][threshold]
    std::vector<bool> evaluated;          ///< class has at least one ground truth
    std::vector<double> map;              ///< per threshold
    double average_map = 0.0;
};

/// Area under the precision envelope of a ranked TP/FP list.
double average_precision(const std::vector<bool>& ranked_tp, std::size_t positives);

EvalReport evaluate_map(const std::vector<Detection>& dets, const std::vector<VideoSample>& videos,
                        const std::vector<std::string>& class_names,
                        const std::vector<double>& thresholds);

// ---- files -----------------------------------------------------------------

void write_features(const std::filesystem::path& path, const Tensor& features);
Tensor read_features(const std::filesystem::path& path);

/// Layout: classes.tsv, videos.tsv (id, duration), annotations.tsv,
/// features/<id>.feat.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_results(const std::vector<Detection>& dets, const std::vector<std::string>& class_names,
                  const std::filesystem::path& path);
std::vector<Detection> load_results(const std::filesystem::path& path,
                                    const std::vector<std::string>& class_names);
void save_eval_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace pfdetr
