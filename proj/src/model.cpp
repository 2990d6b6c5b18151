#include "pfdetr/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace pfdetr {

using ad::Tape;
using ad::Var;

namespace {

constexpr double kMaxCycles = 64.0;
constexpr double kClassPrior = 0.01;

Var linear(Tape& t, const ad::ParamStore& s, const std::string& prefix, Var x) {
    return ad::add_row(ad::matmul(x, t.param(s, prefix + ".w")), t.param(s, prefix + ".b"));
}

Var norm(Tape& t, const ad::ParamStore& s, const std::string& prefix, Var x) {
    return ad::layer_norm(x, t.param(s, prefix + ".g"), t.param(s, prefix + ".b"));
}

Var feed_forward(Tape& t, const ad::ParamStore& s, const std::string& prefix, Var x) {
    return linear(t, s, prefix + ".l2", ad::gelu(linear(t, s, prefix + ".l1", x)));
}

// Splits an N×2 tensor of (center, width) logits into clamped (start, end).
Var logits_to_intervals(Var anchor_logits) {
    Var cw = ad::sigmoid(anchor_logits);
    Var c = ad::slice_cols(cw, 0, 1);
    Var half_w = ad::scale(ad::slice_cols(cw, 1, 2), 0.5);
    Var s = ad::clamp(ad::sub(c, half_w), 0.0, 1.0);
    Var e = ad::clamp(ad::add(c, half_w), 0.0, 1.0);
    return ad::concat_cols({s, e});
}

Tensor anchor_embedding(const Tensor& anchor_logits, std::size_t dim) {
    const std::size_t n = anchor_logits.rows();
    std::vector<double> c(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
        c[i] = 1.0 / (1.0 + std::exp(-anchor_logits(i, 0)));
        w[i] = 1.0 / (1.0 + std::exp(-anchor_logits(i, 1)));
    }
    const Tensor ec = positional_encoding(c, dim / 2);
    const Tensor ew = positional_encoding(w, dim / 2);
    Tensor out(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < dim / 2; ++j) {
            out(i, j) = ec(i, j);
            out(i, dim / 2 + j) = ew(i, j);
        }
    }
    return out;
}

Tensor spaced_anchors(std::size_t n, double width) {
    Tensor a(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const double c = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        a(i, 0) = inverse_sigmoid(c);
        a(i, 1) = inverse_sigmoid(width);
    }
    return a;
}

}  // namespace

void ModelConfig::validate() const {
    if (input_dim == 0 || model_dim == 0 || heads == 0 || ffn_dim == 0 || encoder_layers == 0 ||
        decoder_layers == 0 || queries == 0 || classes == 0)
        throw std::invalid_argument("ModelConfig: all counts must be positive");
    if (model_dim % heads != 0)
        throw std::invalid_argument("ModelConfig: model_dim " + std::to_string(model_dim) +
                                    " not divisible by heads " + std::to_string(heads));
    if (model_dim % 4 != 0)
        throw std::invalid_argument("ModelConfig: model_dim must be a multiple of 4");
    if (!(anchor_width > 0.0 && anchor_width < 1.0) ||
        !(encoder_anchor_width > 0.0 && encoder_anchor_width < 1.0))
        throw std::invalid_argument("ModelConfig: anchor widths must lie in (0,1)");
}

std::string to_string(AttnKind kind) {
    switch (kind) {
        case AttnKind::EncoderSelf: return "encoder-SA";
        case AttnKind::DecoderSelf: return "decoder-SA";
        case AttnKind::DecoderCross: return "decoder-CA";
    }
    return "?";
}

double inverse_sigmoid(double p) {
    p = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(p / (1.0 - p));
}

AttentionResult scaled_attention(Var q, Var k, Var v, const Tensor* mask) {
    if (q.cols() != k.cols())
        throw std::invalid_argument("scaled_attention: query width " + std::to_string(q.cols()) +
                                    " != key width " + std::to_string(k.cols()));
    if (k.rows() != v.rows())
        throw std::invalid_argument("scaled_attention: " + std::to_string(k.rows()) + " keys but " +
                                    std::to_string(v.rows()) + " values");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt_d), mask);
    return {ad::matmul(a, v), a};
}

AttentionResult multi_head_attention(Tape& t, const ad::ParamStore& s, const std::string& prefix,
                                     Var x_q, Var x_k, Var x_v, std::size_t heads,
                                     const Tensor* mask) {
    const std::size_t dim = x_q.cols();
    if (heads == 0 || dim % heads != 0)
        throw std::invalid_argument("multi_head_attention: width " + std::to_string(dim) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    Var q = linear(t, s, prefix + ".q", x_q);
    // A key bias shifts every score of a row equally; softmax ignores it.
    Var k = ad::matmul(x_k, t.param(s, prefix + ".k.w"));
    Var v = linear(t, s, prefix + ".v", x_v);
    if (heads == 1) {
        AttentionResult r = scaled_attention(q, k, v, mask);
        return {linear(t, s, prefix + ".o", r.output), r.map};
    }
    const std::size_t hd = dim / heads;
    std::vector<Var> outs;
    Var map_sum;
    for (std::size_t h = 0; h < heads; ++h) {
        AttentionResult r =
            scaled_attention(ad::slice_cols(q, h * hd, (h + 1) * hd),
                             ad::slice_cols(k, h * hd, (h + 1) * hd),
                             ad::slice_cols(v, h * hd, (h + 1) * hd), mask);
        outs.push_back(r.output);
        map_sum = map_sum.valid() ? ad::add(map_sum, r.map) : r.map;
    }
    Var out = linear(t, s, prefix + ".o", ad::concat_cols(outs));
    return {out, ad::scale(map_sum, 1.0 / static_cast<double>(heads))};
}

double positional_frequency(std::size_t i, std::size_t dim) {
    const double expo = 1.0 - 2.0 * static_cast<double>(i) / static_cast<double>(dim);
    return 2.0 * std::numbers::pi * std::pow(kMaxCycles, expo);
}

Tensor positional_encoding(std::span<const double> positions, std::size_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("positional_encoding: odd width");
    Tensor out(positions.size(), dim);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double arg = positions[r] * positional_frequency(i, dim);
            out(r, 2 * i) = std::sin(arg);
            out(r, 2 * i + 1) = std::cos(arg);
        }
    }
    return out;
}

Interval anchor_to_interval(double center, double width) {
    double s = std::clamp(center - 0.5 * width, 0.0, 1.0);
    double e = std::clamp(center + 0.5 * width, 0.0, 1.0);
    if (e - s < kMinIntervalWidth) {
        const double c = std::clamp(center, 0.5 * kMinIntervalWidth, 1.0 - 0.5 * kMinIntervalWidth);
        s = c - 0.5 * kMinIntervalWidth;
        e = c + 0.5 * kMinIntervalWidth;
    }
    return {s, e};
}

std::vector<Interval> intervals_of(const Tensor& se) {
    std::vector<Interval> out(se.rows());
    for (std::size_t i = 0; i < se.rows(); ++i) out[i] = {se(i, 0), se(i, 1)};
    return out;
}

DetrModel::DetrModel(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    init(seed);
}

void DetrModel::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t D = config_.model_dim;
    auto xavier = [&](std::size_t in, std::size_t out, double gain = 1.0) {
        const double lim = gain * std::sqrt(6.0 / static_cast<double>(in + out));
        Tensor w(in, out);
        for (double& v : w.data()) v = (2.0 * uniform01(rng) - 1.0) * lim;
        return w;
    };
    auto normal = [&](std::size_t rows, std::size_t cols) {
        Tensor w(rows, cols);
        for (double& v : w.data()) {
            const double u = 1.0 - uniform01(rng);
            v = std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * uniform01(rng));
        }
        return w;
    };
    auto add_linear = [&](const std::string& p, std::size_t in, std::size_t out, double gain = 1.0) {
        params_.add(p + ".w", xavier(in, out, gain));
        params_.add(p + ".b", Tensor(1, out));
    };
    auto add_norm = [&](const std::string& p) {
        params_.add(p + ".g", Tensor(1, D, 1.0));
        params_.add(p + ".b", Tensor(1, D));
    };
    auto add_attention = [&](const std::string& p) {
        for (const char* proj : {".q", ".v", ".o"}) add_linear(p + proj, D, D);
        params_.add(p + ".k.w", xavier(D, D));
    };
    auto add_ffn = [&](const std::string& p) {
        add_linear(p + ".l1", D, config_.ffn_dim);
        add_linear(p + ".l2", config_.ffn_dim, D);
    };

    add_linear("input_proj", config_.input_dim, D);
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
        const std::string p = "enc" + std::to_string(l);
        add_norm(p + ".norm1");
        add_attention(p + ".sa");
        add_norm(p + ".norm2");
        add_ffn(p + ".ffn");
    }
    add_norm("enc.norm");
    add_linear("enc.head", D, 3, 0.1);
    params_.at("enc.head.b").value[0] = inverse_sigmoid(kClassPrior);

    params_.add("query.content", normal(config_.queries, D));
    params_.add("query.anchor", spaced_anchors(config_.queries, config_.anchor_width));
    if (config_.hybrid_queries > 0) {
        params_.add("hybrid.content", normal(config_.hybrid_queries, D));
        params_.add("hybrid.anchor", spaced_anchors(config_.hybrid_queries, config_.anchor_width));
    }
    add_linear("dec.ref.l1", D, D);
    add_linear("dec.ref.l2", D, D);
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
        const std::string p = "dec" + std::to_string(l);
        add_norm(p + ".norm1");
        add_attention(p + ".sa");
        add_norm(p + ".norm2");
        add_attention(p + ".ca");
        add_norm(p + ".norm3");
        add_ffn(p + ".ffn");
    }
    add_norm("dec.norm");
    add_linear("dec.cls", D, config_.classes);
    params_.at("dec.cls.b").value.fill(inverse_sigmoid(kClassPrior));
    add_linear("dec.box.l1", D, D);
    params_.add("dec.box.l2.w", Tensor(D, 2));
    params_.add("dec.box.l2.b", Tensor(1, 2));
}

ModelOutput DetrModel::forward(Tape& t, const Tensor& features, bool training) const {
    const auto& s = params_;
    const auto& cfg = config_;
    if (features.cols() != cfg.input_dim)
        throw std::invalid_argument("forward: features have width " +
                                    std::to_string(features.cols()) + ", model expects " +
                                    std::to_string(cfg.input_dim));
    const std::size_t T = features.rows();
    if (T == 0) throw std::invalid_argument("forward: empty feature sequence");
    const std::size_t D = cfg.model_dim;

    ModelOutput out;

    // ---- encoder
    std::vector<double> positions(T);
    for (std::size_t i = 0; i < T; ++i)
        positions[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(T);
    Var pos = t.constant(positional_encoding(positions, D));
    Var x = linear(t, s, "input_proj", t.constant(features));
    for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
        const std::string p = "enc" + std::to_string(l);
        Var h = norm(t, s, p + ".norm1", x);
        Var qk = ad::add(h, pos);
        AttentionResult sa = multi_head_attention(t, s, p + ".sa", qk, qk, h, cfg.heads);
        out.encoder_self.push_back({sa.map, AttnKind::EncoderSelf, l});
        x = ad::add(x, sa.output);
        x = ad::add(x, feed_forward(t, s, p + ".ffn", norm(t, s, p + ".norm2", x)));
    }
    Var memory = norm(t, s, "enc.norm", x);
    out.memory = memory;

    if (training) {
        Var head = linear(t, s, "enc.head", memory);
        Tensor base(T, 2);
        for (std::size_t i = 0; i < T; ++i) {
            base(i, 0) = inverse_sigmoid(positions[i]);
            base(i, 1) = inverse_sigmoid(cfg.encoder_anchor_width);
        }
        Var logits = ad::add(t.constant(std::move(base)), ad::slice_cols(head, 1, 3));
        out.encoder = EncoderPrediction{ad::slice_cols(head, 0, 1), logits_to_intervals(logits)};
    }

    // ---- decoder
    const std::size_t nq = cfg.queries;
    const std::size_t na = training ? cfg.hybrid_queries : 0;
    const std::size_t nt = nq + na;
    Var content = t.param(s, "query.content");
    Var anchors = t.param(s, "query.anchor");
    if (na > 0) {
        content = ad::concat_rows({content, t.param(s, "hybrid.content")});
        anchors = ad::concat_rows({anchors, t.param(s, "hybrid.anchor")});
    }
    std::optional<Tensor> group_mask;
    if (na > 0) {
        group_mask.emplace(nt, nt);
        const double ninf = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < nt; ++i)
            for (std::size_t j = 0; j < nt; ++j)
                if ((i < nq) != (j < nq)) (*group_mask)(i, j) = ninf;
    }
    const Tensor* mask = group_mask ? &*group_mask : nullptr;
    Var mem_key = ad::add(memory, pos);

    Var q = content;
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
        const std::string p = "dec" + std::to_string(l);
        Var qpos = t.constant(anchor_embedding(t.stop_gradient(anchors).value(), D));
        qpos = linear(t, s, "dec.ref.l2", ad::gelu(linear(t, s, "dec.ref.l1", qpos)));

        Var h = norm(t, s, p + ".norm1", q);
        Var qk = ad::add(h, qpos);
        AttentionResult sa = multi_head_attention(t, s, p + ".sa", qk, qk, h, cfg.heads, mask);
        q = ad::add(q, sa.output);

        h = norm(t, s, p + ".norm2", q);
        AttentionResult ca =
            multi_head_attention(t, s, p + ".ca", ad::add(h, qpos), mem_key, memory, cfg.heads);
        q = ad::add(q, ca.output);
        q = ad::add(q, feed_forward(t, s, p + ".ffn", norm(t, s, p + ".norm3", q)));

        Var sa_map = sa.map;
        Var ca_map = ca.map;
        if (na > 0) {
            sa_map = ad::slice_cols(ad::slice_rows(sa_map, 0, nq), 0, nq);
            ca_map = ad::slice_rows(ca_map, 0, nq);
        }
        out.decoder_self.push_back({sa_map, AttnKind::DecoderSelf, l});
        out.decoder_cross.push_back({ca_map, AttnKind::DecoderCross, l});

        Var y = norm(t, s, "dec.norm", q);
        Var logits = linear(t, s, "dec.cls", y);
        Var delta = linear(t, s, "dec.box.l2", ad::gelu(linear(t, s, "dec.box.l1", y)));
        Var refined = ad::add(anchors, delta);
        Var se = logits_to_intervals(refined);
        if (na > 0) {
            out.decoder.push_back({ad::slice_rows(logits, 0, nq), ad::slice_rows(se, 0, nq),
                                   ad::slice_rows(refined, 0, nq)});
            out.hybrid.push_back({ad::slice_rows(logits, nq, nt), ad::slice_rows(se, nq, nt),
                                  ad::slice_rows(refined, nq, nt)});
        } else {
            out.decoder.push_back({logits, se, refined});
        }
        anchors = t.stop_gradient(refined);
    }
    return out;
}

}  // namespace pfdetr
