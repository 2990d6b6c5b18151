#include "pfdetr/feedback.hpp"

#include <stdexcept>

namespace pfdetr {

using ad::Var;

std::string to_string(FeedbackTarget t) {
    switch (t) {
        case FeedbackTarget::PredictionRelation: return "prediction-relation";
        case FeedbackTarget::CrossAttentionGuidance: return "cross-attention-guidance";
        case FeedbackTarget::IntervalOccupancy: return "interval-occupancy";
        case FeedbackTarget::GroundTruthOccupancy: return "ground-truth-occupancy";
    }
    return "?";
}

FeedbackTarget parse_feedback_target(const std::string& s) {
    for (auto t : {FeedbackTarget::PredictionRelation, FeedbackTarget::CrossAttentionGuidance,
                   FeedbackTarget::IntervalOccupancy, FeedbackTarget::GroundTruthOccupancy})
        if (to_string(t) == s) return t;
    throw std::invalid_argument("unknown feedback target '" + s + "'");
}

void FeedbackConfig::validate() const {
    if (encoder_sa < 0.0 || decoder_sa < 0.0 || decoder_ca < 0.0)
        throw std::invalid_argument("feedback weights must be non-negative");
}

Tensor iou_matrix(const std::vector<Interval>& intervals) {
    const std::size_t n = intervals.size();
    for (std::size_t i = 0; i < n; ++i)
        if (intervals[i].start > intervals[i].end)
            throw std::invalid_argument("iou_matrix: interval " + std::to_string(i) +
                                        " has start > end");
    Tensor m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = tiou(intervals[i], intervals[j]);
            m(i, j) = v;
            m(j, i) = v;
        }
    }
    return m;
}

Tensor row_normalize_softmax(const Tensor& map) { return ad::softmax_rows(map); }

CrossRelations ca_relations(Var a) {
    Var qq = ad::row_normalize(ad::matmul_nt(a, a));
    Var at = ad::transpose(a);
    Var kk = ad::row_normalize(ad::matmul_nt(at, at));
    return {qq, kk};
}

Var layer_average(const std::vector<Var>& maps) {
    if (maps.empty()) throw std::invalid_argument("layer_average: no maps");
    if (maps.size() == 1) return maps.front();
    Var acc = maps.front();
    for (std::size_t i = 1; i < maps.size(); ++i) acc = ad::add(acc, maps[i]);
    return ad::scale(acc, 1.0 / static_cast<double>(maps.size()));
}

Tensor layer_average(const std::vector<Tensor>& maps) {
    if (maps.empty()) throw std::invalid_argument("layer_average: no maps");
    Tensor acc = maps.front();
    for (std::size_t i = 1; i < maps.size(); ++i) {
        if (!maps[i].same_shape(acc))
            throw std::invalid_argument("layer_average: shape mismatch " + acc.shape_str() +
                                        " vs " + maps[i].shape_str());
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += maps[i][k];
    }
    if (maps.size() > 1)
        for (double& v : acc.data()) v /= static_cast<double>(maps.size());
    return acc;
}

Var kl_feedback(Var attention, const Tensor& target) { return ad::kl_div_rows(attention, target); }

Tensor interval_guidance_map(const std::vector<Interval>& intervals, std::size_t positions,
                             double smoothing) {
    Tensor g(intervals.size(), positions);
    for (std::size_t i = 0; i < intervals.size(); ++i) {
        double total = 0.0;
        for (std::size_t t = 0; t < positions; ++t) {
            const double center = (static_cast<double>(t) + 0.5) / static_cast<double>(positions);
            const bool inside = intervals[i].length() > 0.0 && center >= intervals[i].start &&
                                center <= intervals[i].end;
            g(i, t) = (inside ? 1.0 : 0.0) + smoothing;
            total += g(i, t);
        }
        for (double& v : g.row(i)) v /= total;
    }
    return g;
}

namespace {

std::vector<Var> maps_of(const std::vector<RecordedAttention>& recs) {
    std::vector<Var> out;
    out.reserve(recs.size());
    for (const auto& r : recs) out.push_back(r.map);
    return out;
}

}  // namespace

FeedbackLosses feedback_bundle(ad::Tape& tape, const ModelOutput& out, const FeedbackConfig& cfg,
                               const std::vector<std::optional<Interval>>* gt_per_query,
                               TargetCache* cache) {
    cfg.validate();
    if (!out.encoder)
        throw std::invalid_argument(
            "feedback_bundle: encoder predictions missing (not a training forward pass)");
    if (out.decoder.empty() || out.decoder_cross.empty() || out.decoder_self.empty() ||
        out.encoder_self.empty())
        throw std::invalid_argument("feedback_bundle: model output lacks attention records");

    FeedbackLosses losses;
    Var zero = tape.constant(Tensor::scalar(0.0));
    losses.encoder_sa = losses.decoder_sa = losses.decoder_ca = zero;
    if (!cfg.any()) return losses;

    const auto dec_intervals = intervals_of(out.decoder.back().intervals.value());
    const auto enc_intervals = intervals_of(out.encoder->intervals.value());
    const Tensor p_dec = cached(cache, [&] { return row_normalize_softmax(iou_matrix(dec_intervals)); });
    const Tensor p_enc = cached(cache, [&] { return row_normalize_softmax(iou_matrix(enc_intervals)); });

    Var ca = layer_average(maps_of(out.decoder_cross));
    const bool ca_guidance = cfg.target == FeedbackTarget::CrossAttentionGuidance;
    std::optional<CrossRelations> rel;
    auto relations = [&]() -> const CrossRelations& {
        if (!rel) rel = ca_relations(ca);
        return *rel;
    };

    if (cfg.decoder_sa > 0.0) {
        const Tensor target =
            ca_guidance ? cached(cache, [&] { return relations().queries.value(); }) : p_dec;
        std::vector<Var> terms;
        for (const auto& r : out.decoder_self) terms.push_back(kl_feedback(r.map, target));
        losses.decoder_sa = layer_average(terms);
    }
    if (cfg.encoder_sa > 0.0) {
        const Tensor target =
            ca_guidance ? cached(cache, [&] { return relations().keys.value(); }) : p_enc;
        losses.encoder_sa = kl_feedback(layer_average(maps_of(out.encoder_self)), target);
    }
    if (cfg.decoder_ca > 0.0) {
        const std::size_t positions = ca.cols();
        switch (cfg.target) {
            case FeedbackTarget::PredictionRelation:
            case FeedbackTarget::CrossAttentionGuidance:
                losses.decoder_ca = ad::add(kl_feedback(relations().queries, p_dec),
                                            kl_feedback(relations().keys, p_enc));
                break;
            case FeedbackTarget::IntervalOccupancy:
                losses.decoder_ca = kl_feedback(
                    ca, cached(cache, [&] { return interval_guidance_map(dec_intervals, positions); }));
                break;
            case FeedbackTarget::GroundTruthOccupancy: {
                if (gt_per_query == nullptr || gt_per_query->size() != ca.rows())
                    throw std::invalid_argument(
                        "feedback_bundle: ground-truth occupancy needs one entry per query");
                std::vector<Interval> targets(ca.rows(), Interval{0.0, 1.0});
                for (std::size_t i = 0; i < targets.size(); ++i)
                    if ((*gt_per_query)[i]) targets[i] = *(*gt_per_query)[i];
                losses.decoder_ca = kl_feedback(
                    ca, cached(cache, [&] { return interval_guidance_map(targets, positions); }));
                break;
            }
        }
    }
    return losses;
}

}  // namespace pfdetr
