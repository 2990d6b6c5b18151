#pragma once

// Set-prediction machinery: bipartite matching between ground-truth actions
// and query predictions, the per-set DETR loss, hybrid one-to-many matching,
// and the combined training objective.

#include <span>
#include <utility>
#include <vector>

#include "pfdetr/autodiff.hpp"
#include "pfdetr/feedback.hpp"
#include "pfdetr/interval.hpp"
#include "pfdetr/model.hpp"
#include "pfdetr/targets.hpp"

namespace pfdetr {

/// Ground-truth action in normalized time.
struct GroundTruthAction {
    std::size_t label = 0;
    Interval interval;
};

void validate(const GroundTruthAction& gt, std::size_t classes);

inline constexpr double kL1Weight = 5.0;
inline constexpr double kIoUWeight = 2.0;

/// 5·(|s−ŝ| + |e−ê|) + 2·(1 − IoU)
double regression_loss(const Interval& target, const Interval& pred);

/// −p̂(c) + regression_loss
double match_cost(const GroundTruthAction& gt, std::span<const double> class_probs,
                  const Interval& pred);

/// Minimum-cost assignment of every row to a distinct column (rows ≤ cols).
Assignment hungarian(const Tensor& cost);

/// Cost matrix (gts × predictions) from class probabilities and intervals.
Tensor cost_matrix(const std::vector<GroundTruthAction>& gts, const Tensor& probs,
                   const std::vector<Interval>& intervals);

/// Class probabilities (sigmoid of logits) of a prediction set.
Tensor class_probabilities(const LayerPrediction& pred);

Assignment match(const LayerPrediction& pred, const std::vector<GroundTruthAction>& gts);

/// Each ground truth replicated k times and matched one-to-one against the
/// auxiliary group. With more replicas than queries, every query is given
/// a distinct replica instead.
Assignment hybrid_assignments(const LayerPrediction& aux, const std::vector<GroundTruthAction>& gts,
                              std::size_t k);

struct SetLoss {
    ad::Var classification;
    ad::Var l1;
    ad::Var iou;
    ad::Var total;
};

/// Sigmoid BCE over every query and class plus regression on matched
/// queries, normalized by max(1, matched pairs). With `stable`, a matched
/// query's target for its class is the detached prediction–GT IoU.
SetLoss detr_set_loss(ad::Tape& tape, const LayerPrediction& pred,
                      const std::vector<GroundTruthAction>& gts, const Assignment& assignment,
                      bool stable, TargetCache* cache = nullptr);

struct LossBreakdown {
    double classification = 0.0;  ///< last decoder layer
    double l1 = 0.0;
    double iou = 0.0;
    double aux_layers = 0.0;  ///< earlier decoder layers
    double hybrid = 0.0;
    double encoder = 0.0;  ///< two-stage encoder head
    double detr = 0.0;
    double encoder_sa = 0.0;
    double decoder_sa = 0.0;
    double decoder_ca = 0.0;
    double total = 0.0;
};

/// L_DETR + λe·L_SA^e + λd·L_SA^d + λc·L_CA^d from the breakdown's components.
double full_objective(const LossBreakdown& b, const FeedbackConfig& cfg);

struct ObjectiveOptions {
    bool stable = true;
    bool two_stage = true;
    std::size_t hybrid_k = 3;
    double hybrid_weight = 1.0;
    FeedbackConfig feedback;
    /// Records or replays every detached target; optional.
    TargetCache* targets = nullptr;
};

struct Objective {
    ad::Var total;
    LossBreakdown breakdown;
};

Objective compute_objective(ad::Tape& tape, const ModelOutput& out,
                            const std::vector<GroundTruthAction>& gts,
                            const ObjectiveOptions& opts);

}  // namespace pfdetr
