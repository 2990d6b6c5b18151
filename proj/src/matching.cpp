#include "pfdetr/matching.hpp"

#include <algorithm>

#include <cmath>
#include <limits>
#include <stdexcept>

namespace pfdetr {

using ad::Var;

void validate(const GroundTruthAction& gt, std::size_t classes) {
    if (gt.label >= classes)
        throw std::invalid_argument("ground truth class " + std::to_string(gt.label) +
                                    " out of range for " + std::to_string(classes) + " classes");
    if (!(gt.interval.start >= 0.0 && gt.interval.start < gt.interval.end &&
          gt.interval.end <= 1.0))
        throw std::invalid_argument("ground truth interval must satisfy 0 <= s < e <= 1");
}

double regression_loss(const Interval& t, const Interval& p) {
    return kL1Weight * (std::abs(t.start - p.start) + std::abs(t.end - p.end)) +
           kIoUWeight * (1.0 - tiou(t, p));
}

double match_cost(const GroundTruthAction& gt, std::span<const double> probs, const Interval& p) {
    if (gt.label >= probs.size())
        throw std::invalid_argument("match_cost: class " + std::to_string(gt.label) +
                                    " out of range for " + std::to_string(probs.size()) +
                                    " scores");
    return -probs[gt.label] + regression_loss(gt.interval, p);
}

// Shortest augmenting path with row/column potentials, O(rows²·cols).
Assignment hungarian(const Tensor& cost) {
    const std::size_t n = cost.rows();
    const std::size_t m = cost.cols();
    if (n > m)
        throw std::invalid_argument("hungarian: " + std::to_string(n) + " rows exceed " +
                                    std::to_string(m) + " columns");
    for (double v : cost.data())
        if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
    Assignment result;
    if (n == 0) return result;

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> col_of_row(n);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) col_of_row[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i) result.pairs.emplace_back(i, col_of_row[i]);
    return result;
}

Tensor cost_matrix(const std::vector<GroundTruthAction>& gts, const Tensor& probs,
                   const std::vector<Interval>& intervals) {
    if (probs.rows() != intervals.size())
        throw std::invalid_argument("cost_matrix: " + std::to_string(probs.rows()) +
                                    " score rows vs " + std::to_string(intervals.size()) +
                                    " intervals");
    Tensor c(gts.size(), intervals.size());
    for (std::size_t g = 0; g < gts.size(); ++g)
        for (std::size_t q = 0; q < intervals.size(); ++q)
            c(g, q) = match_cost(gts[g], probs.row(q), intervals[q]);
    return c;
}

Tensor class_probabilities(const LayerPrediction& pred) {
    Tensor p = pred.logits.value();
    for (double& v : p.data()) v = 1.0 / (1.0 + std::exp(-v));
    return p;
}

Assignment match(const LayerPrediction& pred, const std::vector<GroundTruthAction>& gts) {
    return hungarian(
        cost_matrix(gts, class_probabilities(pred), intervals_of(pred.intervals.value())));
}

Assignment hybrid_assignments(const LayerPrediction& aux, const std::vector<GroundTruthAction>& gts,
                              std::size_t k) {
    if (k == 0) throw std::invalid_argument("hybrid_assignments: k must be >= 1");
    const std::size_t group = aux.logits.rows();
    std::vector<GroundTruthAction> replicated;
    std::vector<std::size_t> origin;
    for (std::size_t rep = 0; rep < k; ++rep)
        for (std::size_t g = 0; g < gts.size(); ++g) {
            replicated.push_back(gts[g]);
            origin.push_back(g);
        }
    if (replicated.size() <= group) {
        Assignment a = match(aux, replicated);
        for (auto& [g, q] : a.pairs) g = origin[g];
        return a;
    }
    // More replicas than queries: every query takes a distinct replica.
    const Tensor cost =
        cost_matrix(replicated, class_probabilities(aux), intervals_of(aux.intervals.value()));
    Tensor by_query(group, replicated.size());
    for (std::size_t r = 0; r < replicated.size(); ++r)
        for (std::size_t q = 0; q < group; ++q) by_query(q, r) = cost(r, q);
    Assignment a;
    for (const auto& [q, r] : hungarian(by_query).pairs) a.pairs.emplace_back(origin[r], q);
    std::sort(a.pairs.begin(), a.pairs.end());
    return a;
}

SetLoss detr_set_loss(ad::Tape& tape, const LayerPrediction& pred,
                      const std::vector<GroundTruthAction>& gts, const Assignment& assignment,
                      bool stable, TargetCache* cache) {
    const std::size_t nq = pred.logits.rows();
    const std::size_t nc = pred.logits.cols();
    std::vector<char> taken(nq, 0);
    for (const auto& [g, q] : assignment.pairs) {
        if (g >= gts.size() || q >= nq)
            throw std::invalid_argument("detr_set_loss: assignment pair (" + std::to_string(g) +
                                        "," + std::to_string(q) + ") out of range");
        if (taken[q]) throw std::invalid_argument("detr_set_loss: prediction matched twice");
        taken[q] = 1;
        if (gts[g].label >= nc)
            throw std::invalid_argument("detr_set_loss: class out of range");
    }
    const auto pred_iv = intervals_of(pred.intervals.value());
    const Tensor targets = cached(cache, [&] {
        Tensor t(nq, nc);
        for (const auto& [g, q] : assignment.pairs)
            t(q, gts[g].label) = stable ? tiou(pred_iv[q], gts[g].interval) : 1.0;
        return t;
    });
    std::vector<std::size_t> rows;
    Tensor gt_se(assignment.size(), 2);
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const auto [g, q] = assignment.pairs[i];
        rows.push_back(q);
        gt_se(i, 0) = gts[g].interval.start;
        gt_se(i, 1) = gts[g].interval.end;
    }
    const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, assignment.size()));

    SetLoss out;
    out.classification = ad::scale(ad::bce_with_logits(pred.logits, targets), norm);
    if (assignment.size() == 0) {
        Var zero = tape.constant(Tensor::scalar(0.0));
        out.l1 = out.iou = zero;
    } else {
        Var p = ad::gather_rows(pred.intervals, rows);
        Var g = tape.constant(gt_se);
        out.l1 = ad::scale(ad::sum(ad::abs(ad::sub(p, g))), kL1Weight * norm);
        Var ps = ad::slice_cols(p, 0, 1), pe = ad::slice_cols(p, 1, 2);
        Var gs = ad::slice_cols(g, 0, 1), ge = ad::slice_cols(g, 1, 2);
        Var inter = ad::relu(ad::sub(ad::minimum(pe, ge), ad::maximum(ps, gs)));
        Var uni = ad::maximum(ad::sub(ad::maximum(pe, ge), ad::minimum(ps, gs)),
                              tape.constant(Tensor(rows.size(), 1, 1e-8)));
        Var iou_sum = ad::sum(ad::div(inter, uni));
        out.iou = ad::scale(ad::add_scalar(ad::scale(iou_sum, -1.0),
                                           static_cast<double>(rows.size())),
                            kIoUWeight * norm);
    }
    out.total = ad::add(ad::add(out.classification, out.l1), out.iou);
    return out;
}

double full_objective(const LossBreakdown& b, const FeedbackConfig& cfg) {
    return b.detr + cfg.encoder_sa * b.encoder_sa + cfg.decoder_sa * b.decoder_sa +
           cfg.decoder_ca * b.decoder_ca;
}

Objective compute_objective(ad::Tape& tape, const ModelOutput& out,
                            const std::vector<GroundTruthAction>& gts,
                            const ObjectiveOptions& opts) {
    if (out.decoder.empty()) throw std::invalid_argument("compute_objective: no decoder layers");
    const std::size_t classes = out.decoder.front().logits.cols();
    for (const auto& g : gts) validate(g, classes);

    Objective obj;
    LossBreakdown& b = obj.breakdown;
    std::vector<Var> detr_terms;
    Assignment last_assignment;
    for (std::size_t l = 0; l < out.decoder.size(); ++l) {
        const Assignment a = cached(opts.targets, [&] { return match(out.decoder[l], gts); });
        SetLoss s = detr_set_loss(tape, out.decoder[l], gts, a, opts.stable, opts.targets);
        if (l + 1 == out.decoder.size()) {
            b.classification = s.classification.value().item();
            b.l1 = s.l1.value().item();
            b.iou = s.iou.value().item();
            last_assignment = a;
        } else {
            b.aux_layers += s.total.value().item();
        }
        detr_terms.push_back(s.total);
    }
    for (const auto& h : out.hybrid) {
        const Assignment a =
            cached(opts.targets, [&] { return hybrid_assignments(h, gts, opts.hybrid_k); });
        Var t = ad::scale(detr_set_loss(tape, h, gts, a, opts.stable, opts.targets).total,
                          opts.hybrid_weight);
        b.hybrid += t.value().item();
        detr_terms.push_back(t);
    }
    if (opts.two_stage) {
        if (!out.encoder)
            throw std::invalid_argument("compute_objective: two-stage loss needs encoder predictions");
        std::vector<GroundTruthAction> agnostic = gts;
        for (auto& g : agnostic) g.label = 0;
        LayerPrediction enc{out.encoder->confidence_logits, out.encoder->intervals, {}};
        const Assignment a = cached(opts.targets, [&] { return match(enc, agnostic); });
        Var t = detr_set_loss(tape, enc, agnostic, a, opts.stable, opts.targets).total;
        b.encoder = t.value().item();
        detr_terms.push_back(t);
    }
    Var total = detr_terms.front();
    for (std::size_t i = 1; i < detr_terms.size(); ++i) total = ad::add(total, detr_terms[i]);
    b.detr = total.value().item();

    if (opts.feedback.any()) {
        std::vector<std::optional<Interval>> gt_per_query(out.decoder.back().logits.rows());
        for (const auto& [g, q] : last_assignment.pairs) gt_per_query[q] = gts[g].interval;
        const FeedbackLosses fb =
            feedback_bundle(tape, out, opts.feedback, &gt_per_query, opts.targets);
        b.encoder_sa = fb.encoder_sa.value().item();
        b.decoder_sa = fb.decoder_sa.value().item();
        b.decoder_ca = fb.decoder_ca.value().item();
        if (opts.feedback.encoder_sa > 0.0)
            total = ad::add(total, ad::scale(fb.encoder_sa, opts.feedback.encoder_sa));
        if (opts.feedback.decoder_sa > 0.0)
            total = ad::add(total, ad::scale(fb.decoder_sa, opts.feedback.decoder_sa));
        if (opts.feedback.decoder_ca > 0.0)
            total = ad::add(total, ad::scale(fb.decoder_ca, opts.feedback.decoder_ca));
    }
    b.total = full_objective(b, opts.feedback);
    obj.total = total;
    return obj;
}

}  // namespace pfdetr
