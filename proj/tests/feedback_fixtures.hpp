#pragma once

// Hand-built model outputs for the feedback losses: one whose attention maps
// sit exactly on their targets, and one whose maps are all rank-1.

#include <cmath>
#include <vector>

#include "pfdetr/feedback.hpp"
#include "pfdetr/model.hpp"

namespace pfdetr::testing {

/// `groups` disjoint intervals, each repeated `size` times.
inline std::vector<Interval> grouped_intervals(std::size_t groups, std::size_t size) {
    std::vector<Interval> out;
    const double w = 1.0 / static_cast<double>(groups);
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < size; ++i)
            out.push_back({w * static_cast<double>(g) + 0.1 * w, w * static_cast<double>(g) + 0.9 * w});
    return out;
}

inline Tensor intervals_tensor(const std::vector<Interval>& iv) {
    Tensor t(iv.size(), 2);
    for (std::size_t i = 0; i < iv.size(); ++i) {
        t(i, 0) = iv[i].start;
        t(i, 1) = iv[i].end;
    }
    return t;
}

/// Row-stochastic symmetric A with A·A proportional to softmax(IoU) of
/// `groups` equal-sized groups. For block IoU B (ones within a group) the
/// target is ∝ J + (e−1)B, whose square root is αJ + βB with
/// β = sqrt((e−1)/n) and α the positive root of α²N + 2αβn = 1.
inline Tensor block_sqrt_attention(std::size_t groups, std::size_t size) {
    const double n = static_cast<double>(size);
    const double N = static_cast<double>(groups * size);
    const double beta = std::sqrt((std::exp(1.0) - 1.0) / n);
    const double alpha = (-beta * n + std::sqrt(beta * beta * n * n + N)) / N;
    const std::size_t total = groups * size;
    Tensor a(total, total);
    for (std::size_t i = 0; i < total; ++i)
        for (std::size_t j = 0; j < total; ++j) a(i, j) = alpha + (i / size == j / size ? beta : 0.0);
    for (std::size_t i = 0; i < total; ++i) {
        double s = 0.0;
        for (double v : a.row(i)) s += v;
        for (double& v : a.row(i)) v /= s;
    }
    return a;
}

struct FeedbackFixture {
    ad::Tape tape;
    ModelOutput out;
};

/// Attention maps placed on their own targets: A^d = P^d, A^e = P^e and
/// A^c with both cross-attention relations equal to the IoU targets.
inline void build_fixed_point(FeedbackFixture& f, std::size_t groups, std::size_t size,
                              std::size_t enc_layers = 2, std::size_t dec_layers = 4) {
    const auto iv = grouped_intervals(groups, size);
    const Tensor p = row_normalize_softmax(iou_matrix(iv));
    const Tensor ca = block_sqrt_attention(groups, size);
    auto& t = f.tape;
    ad::Var se = t.leaf(intervals_tensor(iv));
    f.out.encoder = EncoderPrediction{t.leaf(Tensor(iv.size(), 1)), se};
    for (std::size_t l = 0; l < enc_layers; ++l) f.out.encoder_self.push_back({t.leaf(p), AttnKind::EncoderSelf, l});
    for (std::size_t l = 0; l < dec_layers; ++l) {
        f.out.decoder.push_back({t.leaf(Tensor(iv.size(), 3)), se, t.leaf(Tensor(iv.size(), 2))});
        f.out.decoder_self.push_back({t.leaf(p), AttnKind::DecoderSelf, l});
        f.out.decoder_cross.push_back({t.leaf(ca), AttnKind::DecoderCross, l});
    }
}

/// Rank-1 maps 𝟙aᵀ with a nearly one-hot a, over `queries` and `positions`
/// spread-out disjoint predictions.
inline void build_collapsed(FeedbackFixture& f, std::size_t queries, std::size_t positions,
                            std::size_t enc_layers = 2, std::size_t dec_layers = 4) {
    auto rank1 = [](std::size_t rows, std::size_t cols) {
        std::vector<double> logits(cols, 0.0);
        logits[0] = 10.0;
        Tensor z(1, cols, logits);
        const Tensor a = ad::softmax_rows(z);
        Tensor m(rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) m(r, c) = a(0, c);
        return m;
    };
    auto& t = f.tape;
    const auto dec_iv = grouped_intervals(queries, 1);
    const auto enc_iv = grouped_intervals(positions, 1);
    ad::Var dec_se = t.leaf(intervals_tensor(dec_iv));
    f.out.encoder = EncoderPrediction{t.leaf(Tensor(positions, 1)), t.leaf(intervals_tensor(enc_iv))};
    for (std::size_t l = 0; l < enc_layers; ++l)
        f.out.encoder_self.push_back({t.leaf(rank1(positions, positions)), AttnKind::EncoderSelf, l});
    for (std::size_t l = 0; l < dec_layers; ++l) {
        f.out.decoder.push_back({t.leaf(Tensor(queries, 3)), dec_se, t.leaf(Tensor(queries, 2))});
        f.out.decoder_self.push_back({t.leaf(rank1(queries, queries)), AttnKind::DecoderSelf, l});
        f.out.decoder_cross.push_back({t.leaf(rank1(queries, positions)), AttnKind::DecoderCross, l});
    }
}

}  // namespace pfdetr::testing
