#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "pfdetr/model.hpp"
#include "test_support.hpp"

using namespace pfdetr;
using namespace pfdetr::testing;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.input_dim = 6;
    c.model_dim = 16;
    c.heads = 4;
    c.ffn_dim = 24;
    c.queries = 5;
    c.classes = 3;
    return c;
}

void expect_stochastic_rows(const Tensor& a, double tol) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (double v : a.row(r)) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, tol);
    }
}

}  // namespace

TEST(ScaledAttention, SingleKeyReplicatesValue) {
    ad::Tape t;
    std::mt19937_64 rng(1);
    auto r = scaled_attention(t.constant(random_tensor(rng, 4, 3)), t.constant(random_tensor(rng, 1, 3)),
                              t.constant(Tensor{{2.0, -1.0, 0.5}}));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(r.map.value()(i, 0), 1.0);
        EXPECT_EQ(r.output.value()(i, 0), 2.0);
        EXPECT_EQ(r.output.value()(i, 2), 0.5);
    }
}

TEST(ScaledAttention, ZeroScoresGiveUniformRows) {
    ad::Tape t;
    auto r = scaled_attention(t.constant(Tensor(3, 2)), t.constant(Tensor(5, 2)), t.constant(Tensor(5, 2)));
    for (double v : r.map.value().data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(ScaledAttention, TwoByTwoHandCase) {
    ad::Tape t;
    auto r = scaled_attention(t.constant({{0}, {1}}), t.constant({{0}, {1}}), t.constant({{1}, {2}}));
    const double e = std::exp(1.0);
    EXPECT_DOUBLE_EQ(r.map.value()(0, 0), 0.5);
    EXPECT_NEAR(r.map.value()(1, 0), 1.0 / (1.0 + e), 1e-15);
    EXPECT_NEAR(r.map.value()(1, 1), e / (1.0 + e), 1e-15);
    EXPECT_DOUBLE_EQ(r.output.value()(0, 0), 1.5);
    EXPECT_NEAR(r.output.value()(1, 0), (1.0 + 2.0 * e) / (1.0 + e), 1e-15);
}

TEST(ScaledAttention, RejectsMismatchedWidths) {
    ad::Tape t;
    EXPECT_THROW(scaled_attention(t.constant(Tensor(2, 3)), t.constant(Tensor(2, 4)), t.constant(Tensor(2, 4))),
                 std::invalid_argument);
    EXPECT_THROW(scaled_attention(t.constant(Tensor(2, 3)), t.constant(Tensor(2, 3)), t.constant(Tensor(3, 3))),
                 std::invalid_argument);
}

TEST(MultiHeadAttention, SingleHeadReducesToScaledAttentionPlusProjection) {
    std::mt19937_64 rng(2);
    ad::ParamStore s;
    for (const char* p : {"m.q", "m.k", "m.v", "m.o"}) {
        s.add(std::string(p) + ".w", random_tensor(rng, 4, 4));
        if (std::string(p) != "m.k") s.add(std::string(p) + ".b", random_tensor(rng, 1, 4));
    }
    const Tensor xq = random_tensor(rng, 3, 4), xk = random_tensor(rng, 5, 4);
    ad::Tape t;
    auto mha = multi_head_attention(t, s, "m", t.constant(xq), t.constant(xk), t.constant(xk), 1);
    auto lin = [&](const char* p, ad::Var x) {
        return ad::add_row(ad::matmul(x, t.param(s, std::string(p) + ".w")), t.param(s, std::string(p) + ".b"));
    };
    auto ref = scaled_attention(lin("m.q", t.constant(xq)), ad::matmul(t.constant(xk), t.param(s, "m.k.w")),
                                lin("m.v", t.constant(xk)));
    EXPECT_EQ(mha.map.value(), ref.map.value());
    EXPECT_EQ(mha.output.value(), lin("m.o", ref.output).value());
}

TEST(MultiHeadAttention, HeadAveragedMapIsStochasticAndOutputShaped) {
    std::mt19937_64 rng(3);
    for (std::size_t heads : {1u, 2u, 4u, 8u}) {
        ad::ParamStore s;
        for (const char* p : {"m.q", "m.k", "m.v", "m.o"}) {
            s.add(std::string(p) + ".w", random_tensor(rng, 8, 8));
            if (std::string(p) != "m.k") s.add(std::string(p) + ".b", random_tensor(rng, 1, 8));
        }
        ad::Tape t;
        auto r = multi_head_attention(t, s, "m", t.constant(random_tensor(rng, 6, 8)),
                                      t.constant(random_tensor(rng, 9, 8)), t.constant(random_tensor(rng, 9, 8)),
                                      heads);
        EXPECT_EQ(r.output.rows(), 6u);
        EXPECT_EQ(r.output.cols(), 8u);
        expect_stochastic_rows(r.map.value(), 1e-12);
    }
}

TEST(PositionalEncoding, ZeroPositionAndHandValue) {
    const std::vector<double> pos = {0.0, 0.3};
    const Tensor pe = positional_encoding(pos, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(pe(0, 2 * i), 0.0);
        EXPECT_EQ(pe(0, 2 * i + 1), 1.0);
    }
    // i = 1, dim = 8: f = 2π·64^(1 − 2/8) = 2π·64^0.75 = 2π·22.627...
    const double f = 2.0 * std::numbers::pi * 22.627416997969522;
    EXPECT_NEAR(positional_frequency(1, 8), f, 1e-9);
    EXPECT_NEAR(pe(1, 2), std::sin(0.3 * f), 1e-12);
    EXPECT_NEAR(pe(1, 3), std::cos(0.3 * f), 1e-12);
}

TEST(PositionalEncoding, DistinctPositionsOnAGrid) {
    std::vector<double> pos;
    for (int i = 0; i < 192; ++i) pos.push_back((i + 0.5) / 192.0);
    const Tensor pe = positional_encoding(pos, 16);
    for (std::size_t a = 0; a < pos.size(); ++a)
        for (std::size_t b = a + 1; b < pos.size(); ++b) {
            double d = 0.0;
            for (std::size_t j = 0; j < 16; ++j) d += std::abs(pe(a, j) - pe(b, j));
            EXPECT_GT(d, 1e-6) << a << " vs " << b;
        }
}

TEST(Anchor, ToIntervalFixtures) {
    EXPECT_EQ(anchor_to_interval(0.5, 0.2), (Interval{0.4, 0.6}));
    const Interval clipped = anchor_to_interval(0.05, 0.2);
    EXPECT_DOUBLE_EQ(clipped.start, 0.0);
    EXPECT_DOUBLE_EQ(clipped.end, 0.15);
    const Interval tiny = anchor_to_interval(0.5, 1e-7);
    EXPECT_NEAR(tiny.length(), kMinIntervalWidth, 1e-15);
    const Interval edge = anchor_to_interval(1.0, 0.0);
    EXPECT_NEAR(edge.length(), kMinIntervalWidth, 1e-15);
    EXPECT_LE(edge.end, 1.0);
}

TEST(ModelConfig, Validation) {
    ModelConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = small_config();
    c.queries = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(DetrModel, DefaultStructureCountsAndShapes) {
    ModelConfig c;
    c.model_dim = 32;
    c.heads = 4;
    c.ffn_dim = 32;
    DetrModel m(c, 7);
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor(rng, 24, c.input_dim);
    ad::Tape t;
    const ModelOutput out = m.forward(t, x, true);
    ASSERT_EQ(out.encoder_self.size(), 2u);
    ASSERT_EQ(out.decoder_self.size(), 4u);
    ASSERT_EQ(out.decoder_cross.size(), 4u);
    ASSERT_EQ(out.decoder.size(), 4u);
    EXPECT_EQ(out.memory.rows(), 24u);
    EXPECT_EQ(out.memory.cols(), 32u);
    ASSERT_TRUE(out.encoder.has_value());
    EXPECT_EQ(out.encoder->confidence_logits.rows(), 24u);
    EXPECT_EQ(out.encoder->intervals.rows(), 24u);
    for (const auto& a : out.encoder_self) {
        EXPECT_EQ(a.map.rows(), 24u);
        expect_stochastic_rows(a.map.value(), 1e-9);
    }
    for (std::size_t l = 0; l < 4; ++l) {
        EXPECT_EQ(out.decoder_self[l].map.rows(), 40u);
        EXPECT_EQ(out.decoder_self[l].map.cols(), 40u);
        EXPECT_EQ(out.decoder_cross[l].map.rows(), 40u);
        EXPECT_EQ(out.decoder_cross[l].map.cols(), 24u);
        expect_stochastic_rows(out.decoder_self[l].map.value(), 1e-9);
        expect_stochastic_rows(out.decoder_cross[l].map.value(), 1e-9);
        EXPECT_EQ(out.decoder[l].logits.rows(), 40u);
        EXPECT_EQ(out.decoder[l].logits.cols(), 3u);
        for (double z : out.decoder[l].logits.value().data()) {
            const double p = 1.0 / (1.0 + std::exp(-z));
            EXPECT_GT(p, 0.0);
            EXPECT_LT(p, 1.0);
        }
    }
    ad::Tape t2;
    const ModelOutput inf = m.forward(t2, x, false);
    EXPECT_FALSE(inf.encoder.has_value());
    EXPECT_TRUE(inf.hybrid.empty());
}

TEST(DetrModel, HybridGroupIsSeparatedFromRecordedMaps) {
    ModelConfig c = small_config();
    c.hybrid_queries = 10;
    DetrModel m(c, 3);
    std::mt19937_64 rng(2);
    ad::Tape t;
    const ModelOutput out = m.forward(t, random_tensor(rng, 8, c.input_dim), true);
    ASSERT_EQ(out.hybrid.size(), c.decoder_layers);
    EXPECT_EQ(out.hybrid[0].logits.rows(), 10u);
    EXPECT_EQ(out.decoder[0].logits.rows(), 5u);
    EXPECT_EQ(out.decoder_self[0].map.rows(), 5u);
    EXPECT_EQ(out.decoder_self[0].map.cols(), 5u);
    // Group masking keeps main-query self-attention rows stochastic on their own block.
    for (const auto& a : out.decoder_self) expect_stochastic_rows(a.map.value(), 1e-9);
    EXPECT_EQ(out.decoder_cross[0].map.rows(), 5u);

    // The main group never sees the hybrid group: its predictions equal an
    // inference pass without the auxiliary queries.
    ad::Tape t2;
    std::mt19937_64 rng2(2);
    const ModelOutput inf = m.forward(t2, random_tensor(rng2, 8, c.input_dim), false);
    for (std::size_t l = 0; l < c.decoder_layers; ++l) {
        for (std::size_t i = 0; i < out.decoder[l].logits.value().size(); ++i)
            EXPECT_NEAR(out.decoder[l].logits.value()[i], inf.decoder[l].logits.value()[i], 1e-12);
    }
}

TEST(DetrModel, ZeroDeltasKeepAnchorsAcrossLayers) {
    // The box head's last layer starts at zero, so an untrained model
    // refines nothing.
    ModelConfig c = small_config();
    DetrModel m(c, 5);
    std::mt19937_64 rng(4);
    ad::Tape t;
    const ModelOutput out = m.forward(t, random_tensor(rng, 7, c.input_dim), false);
    const Tensor& init = m.params().at("query.anchor").value;
    for (const auto& layer : out.decoder) {
        EXPECT_EQ(layer.anchors.value(), init);
        for (std::size_t q = 0; q < c.queries; ++q) {
            const double cc = 1.0 / (1.0 + std::exp(-layer.anchors.value()(q, 0)));
            const double ww = 1.0 / (1.0 + std::exp(-layer.anchors.value()(q, 1)));
            EXPECT_GT(cc, 0.0);
            EXPECT_LT(cc, 1.0);
            EXPECT_NEAR(ww, c.anchor_width, 1e-12);
        }
    }
}

TEST(DetrModel, ForwardIsDeterministicPerSeed) {
    ModelConfig c = small_config();
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor(rng, 9, c.input_dim);
    DetrModel a(c, 11), b(c, 11), other(c, 12);
    ad::Tape ta, tb, tc;
    EXPECT_EQ(a.forward(ta, x, true).decoder.back().logits.value(),
              b.forward(tb, x, true).decoder.back().logits.value());
    EXPECT_NE(a.params().at("input_proj.w").value, other.params().at("input_proj.w").value);
}

TEST(DetrModel, RejectsWrongInputWidth) {
    DetrModel m(small_config(), 1);
    ad::Tape t;
    EXPECT_THROW(m.forward(t, Tensor(4, 5), false), std::invalid_argument);
    EXPECT_THROW(m.forward(t, Tensor(0, 6), false), std::invalid_argument);
}
