#pragma once

// Prediction-feedback: IoU relations among the model's own predicted
// intervals serve as constant targets for the relations carried by the
// self- and cross-attention maps.

#include <optional>
#include <string>
#include <vector>

#include "pfdetr/autodiff.hpp"
#include "pfdetr/interval.hpp"
#include "pfdetr/model.hpp"
#include "pfdetr/targets.hpp"

namespace pfdetr {

enum class FeedbackTarget {
    PredictionRelation,      ///< IoU relations of predictions for every term
    CrossAttentionGuidance,  ///< self-attention targets taken from the CA relations
    IntervalOccupancy,       ///< CA map matched directly to predicted-interval occupancy
    GroundTruthOccupancy,    ///< CA map matched directly to ground-truth occupancy
};

std::string to_string(FeedbackTarget t);
FeedbackTarget parse_feedback_target(const std::string& s);

struct FeedbackConfig {
    double encoder_sa = 2.0;
    double decoder_sa = 2.0;
    double decoder_ca = 2.0;
    FeedbackTarget target = FeedbackTarget::PredictionRelation;

    void validate() const;
    bool any() const { return encoder_sa > 0.0 || decoder_sa > 0.0 || decoder_ca > 0.0; }
};

/// Pairwise IoU of intervals; symmetric with the diagonal set to 1.
Tensor iou_matrix(const std::vector<Interval>& intervals);

/// Row-wise softmax of a relation map.
Tensor row_normalize_softmax(const Tensor& map);

struct CrossRelations {
    ad::Var queries;  ///< A·Aᵀ, rows normalized by their sums
    ad::Var keys;     ///< Aᵀ·A, rows normalized by their sums (zero rows uniform)
};

CrossRelations ca_relations(ad::Var cross_attention);

ad::Var layer_average(const std::vector<ad::Var>& maps);
Tensor layer_average(const std::vector<Tensor>& maps);

/// KL(A ‖ P) averaged over rows; P is never differentiated.
ad::Var kl_feedback(ad::Var attention, const Tensor& target);

/// Row i is the ε-smoothed indicator of interval i over `positions` equally
/// spaced cells (cell centers tested for membership), normalized to sum 1.
Tensor interval_guidance_map(const std::vector<Interval>& intervals, std::size_t positions,
                             double smoothing = 1e-3);

struct FeedbackLosses {
    ad::Var encoder_sa;
    ad::Var decoder_sa;
    ad::Var decoder_ca;
};

/// The three feedback terms for one training forward pass. Terms whose
/// weight is zero are returned as constant zeros. `gt_per_query` is only
/// consulted by FeedbackTarget::GroundTruthOccupancy.
FeedbackLosses feedback_bundle(ad::Tape& tape, const ModelOutput& out, const FeedbackConfig& cfg,
                               const std::vector<std::optional<Interval>>* gt_per_query = nullptr,
                               TargetCache* cache = nullptr);

}  // namespace pfdetr
