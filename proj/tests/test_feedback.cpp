#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "feedback_fixtures.hpp"
#include "pfdetr/feedback.hpp"
#include "pfdetr/matching.hpp"
#include "test_support.hpp"

using namespace pfdetr;
using namespace pfdetr::testing;

namespace {

double item(ad::Var v) { return v.value().item(); }

}  // namespace

TEST(IouMatrix, HandFixtures) {
    const double L = 3.0;  // [0,2] and [1,3] in a 3-second video
    const Tensor m = iou_matrix({{0.0, 0.5}, {0.0, 0.5}, {0.6, 0.9}, {0.0 / L, 2.0 / L}, {1.0 / L, 3.0 / L}});
    EXPECT_EQ(m(0, 1), 1.0);
    EXPECT_EQ(m(0, 2), 0.0);
    EXPECT_NEAR(m(3, 4), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(m(4, 3), 1.0 / 3.0, 1e-15);
}

TEST(IouMatrix, PropertiesOnRandomSets) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Interval> iv(random_size(rng, 1, 12));
        for (auto& x : iv) x = random_interval(rng, 0.0);
        const Tensor m = iou_matrix(iv);
        for (std::size_t i = 0; i < iv.size(); ++i) {
            EXPECT_EQ(m(i, i), 1.0);
            for (std::size_t j = 0; j < iv.size(); ++j) {
                EXPECT_EQ(m(i, j), m(j, i));
                EXPECT_GE(m(i, j), 0.0);
                EXPECT_LE(m(i, j), 1.0);
            }
        }
    }
}

TEST(IouMatrix, RejectsReversedInterval) {
    EXPECT_THROW(iou_matrix({{0.2, 0.4}, {0.5, 0.3}}), std::invalid_argument);
}

TEST(RowNormalizeSoftmax, Fixtures) {
    const Tensor s = row_normalize_softmax(Tensor{{0.3, 0.3, 0.3}, {0.0, std::log(2.0), -1.0}});
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s(0, c), 1.0 / 3.0, 1e-15);
    const Tensor t = row_normalize_softmax(Tensor{{0.0, std::log(2.0)}});
    EXPECT_NEAR(t(0, 0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(t(0, 1), 2.0 / 3.0, 1e-15);
    double sum = 0.0;
    for (double v : s.row(1)) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(CaRelations, UniformAndIdentity) {
    ad::Tape t;
    const auto u = ca_relations(t.constant(Tensor(3, 5, 0.2)));
    for (double v : u.queries.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    for (double v : u.keys.value().data()) EXPECT_NEAR(v, 0.2, 1e-15);
    const auto id = ca_relations(t.constant(Tensor::identity(4)));
    EXPECT_EQ(id.queries.value(), Tensor::identity(4));
    EXPECT_EQ(id.keys.value(), Tensor::identity(4));
}

TEST(CaRelations, TwoByThreeHandCase) {
    ad::Tape t;
    const auto r = ca_relations(t.constant({{0.5, 0.5, 0.0}, {0.0, 0.25, 0.75}}));
    // A·Aᵀ = [[0.5, 0.125], [0.125, 0.625]]
    const Tensor& qq = r.queries.value();
    EXPECT_NEAR(qq(0, 0), 0.8, 1e-15);
    EXPECT_NEAR(qq(0, 1), 0.2, 1e-15);
    EXPECT_NEAR(qq(1, 0), 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(qq(1, 1), 5.0 / 6.0, 1e-15);
    // Aᵀ·A = [[.25,.25,0],[.25,.3125,.1875],[0,.1875,.5625]]
    const Tensor& kk = r.keys.value();
    const Tensor expected{{0.5, 0.5, 0.0}, {1.0 / 3.0, 5.0 / 12.0, 0.25}, {0.0, 0.25, 0.75}};
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(kk[i], expected[i], 1e-15);
}

TEST(CaRelations, ZeroColumnBecomesUniformKeyRow) {
    ad::Tape t;
    const auto r = ca_relations(t.constant({{1.0, 0.0}, {1.0, 0.0}}));
    EXPECT_DOUBLE_EQ(r.keys.value()(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(r.keys.value()(1, 1), 0.5);
}

TEST(LayerAverage, Fixtures) {
    const Tensor a{{0.2, 0.8}};
    EXPECT_EQ(layer_average(std::vector<Tensor>{a}), a);
    const Tensor same = layer_average(std::vector<Tensor>{a, a, a});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(same[i], a[i], 1e-15);
    const Tensor m = layer_average(std::vector<Tensor>{Tensor{{1.0, 0.0}}, Tensor{{0.0, 1.0}}});
    EXPECT_EQ(m, (Tensor{{0.5, 0.5}}));
    ad::Tape t;
    const ad::Var v = layer_average(std::vector<ad::Var>{t.constant({{1.0, 0.0}}), t.constant({{0.0, 1.0}})});
    EXPECT_EQ(v.value(), (Tensor{{0.5, 0.5}}));
    EXPECT_THROW(layer_average(std::vector<Tensor>{}), std::invalid_argument);
}

TEST(KlFeedback, Fixtures) {
    ad::Tape t;
    const Tensor p{{0.1, 0.9}, {0.4, 0.6}};
    EXPECT_EQ(item(kl_feedback(t.constant(p), p)), 0.0);
    EXPECT_NEAR(item(kl_feedback(t.constant({{1.0, 0.0}, {1.0, 0.0}}), Tensor(2, 2, 0.5))), std::log(2.0), 1e-15);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 100; ++i) {
        const Tensor a = random_stochastic(rng, 3, 4), b = random_stochastic(rng, 3, 4);
        EXPECT_GE(item(kl_feedback(t.constant(a), b)), 0.0);
    }
}

TEST(IntervalGuidance, Fixtures) {
    const Tensor full = interval_guidance_map({{0.0, 1.0}}, 6);
    for (double v : full.data()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
    const Tensor half = interval_guidance_map({{0.5, 1.0}}, 4, 1e-15);
    EXPECT_NEAR(half(0, 0), 0.0, 1e-14);
    EXPECT_NEAR(half(0, 1), 0.0, 1e-14);
    EXPECT_NEAR(half(0, 2), 0.5, 1e-14);
    EXPECT_NEAR(half(0, 3), 0.5, 1e-14);
    const Tensor empty = interval_guidance_map({{0.3, 0.3}}, 5);
    for (double v : empty.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(FeedbackBundle, FixedPointDrivesEveryLossToZero) {
    for (auto [groups, size] : {std::pair<std::size_t, std::size_t>{2, 3}, {3, 2}, {4, 5}, {1, 6}}) {
        FeedbackFixture f;
        build_fixed_point(f, groups, size);
        const FeedbackLosses l = feedback_bundle(f.tape, f.out, FeedbackConfig{});
        EXPECT_LT(item(l.encoder_sa), 1e-9) << groups << "x" << size;
        EXPECT_LT(item(l.decoder_sa), 1e-9) << groups << "x" << size;
        EXPECT_LT(item(l.decoder_ca), 1e-9) << groups << "x" << size;
    }
}

TEST(FeedbackBundle, CollapsedFixtureGivesLargeLosses) {
    FeedbackFixture f;
    build_collapsed(f, 8, 12);
    const FeedbackLosses l = feedback_bundle(f.tape, f.out, FeedbackConfig{});
    EXPECT_GT(item(l.encoder_sa), 0.5);
    EXPECT_GT(item(l.decoder_sa), 0.5);
    EXPECT_GT(item(l.decoder_ca), 0.5);
}

TEST(FeedbackBundle, ZeroWeightsGiveConstantZeros) {
    FeedbackFixture f;
    build_collapsed(f, 4, 6);
    FeedbackConfig off{0.0, 0.0, 0.0, FeedbackTarget::PredictionRelation};
    const FeedbackLosses l = feedback_bundle(f.tape, f.out, off);
    EXPECT_EQ(item(l.encoder_sa), 0.0);
    EXPECT_EQ(item(l.decoder_sa), 0.0);
    EXPECT_EQ(item(l.decoder_ca), 0.0);
}

TEST(FeedbackBundle, RequiresEncoderPredictions) {
    FeedbackFixture f;
    build_collapsed(f, 4, 6);
    f.out.encoder.reset();
    EXPECT_THROW(feedback_bundle(f.tape, f.out, FeedbackConfig{}), std::invalid_argument);
}

TEST(FeedbackBundle, TargetVariantsAreFiniteAndDistinct) {
    std::vector<double> ca_values;
    for (auto target : {FeedbackTarget::PredictionRelation, FeedbackTarget::CrossAttentionGuidance,
                        FeedbackTarget::IntervalOccupancy, FeedbackTarget::GroundTruthOccupancy}) {
        FeedbackFixture f;
        build_collapsed(f, 4, 6);
        FeedbackConfig cfg;
        cfg.target = target;
        std::vector<std::optional<Interval>> gt(4);
        gt[1] = Interval{0.2, 0.5};
        const FeedbackLosses l = feedback_bundle(f.tape, f.out, cfg, &gt);
        for (double v : {item(l.encoder_sa), item(l.decoder_sa), item(l.decoder_ca)}) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_GE(v, 0.0);
        }
        ca_values.push_back(item(l.decoder_ca));
        EXPECT_EQ(parse_feedback_target(to_string(target)), target);
    }
    EXPECT_NE(ca_values[0], ca_values[2]);
    EXPECT_NE(ca_values[2], ca_values[3]);
    FeedbackFixture f;
    build_collapsed(f, 4, 6);
    FeedbackConfig cfg;
    cfg.target = FeedbackTarget::GroundTruthOccupancy;
    EXPECT_THROW(feedback_bundle(f.tape, f.out, cfg), std::invalid_argument);
}

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.input_dim = 5;
    c.model_dim = 16;
    c.heads = 2;
    c.ffn_dim = 16;
    c.queries = 6;
    c.classes = 2;
    return c;
}

void randomize(DetrModel& m, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    for (auto& p : m.params())
        for (double& v : p.value.data()) v += scale * (2.0 * uniform01(rng) - 1.0);
}

}  // namespace

TEST(FeedbackBundle, StopGradientLeavesPredictionHeadsUntouched) {
    DetrModel m(toy_config(), 4);
    randomize(m, 5, 0.2);
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor(rng, 10, 5);
    for (auto target : {FeedbackTarget::PredictionRelation, FeedbackTarget::CrossAttentionGuidance,
                        FeedbackTarget::IntervalOccupancy}) {
        m.params().zero_grad();
        ad::Tape t;
        const ModelOutput out = m.forward(t, x, true);
        FeedbackConfig cfg;
        cfg.target = target;
        const FeedbackLosses l = feedback_bundle(t, out, cfg);
        ad::Var total = ad::add(ad::add(l.encoder_sa, l.decoder_sa), l.decoder_ca);
        ASSERT_GT(item(total), 0.0);
        t.backward(total);
        t.accumulate_param_grads(m.params());
        bool attention_moved = false;
        for (const auto& p : m.params()) {
            const bool head = p.name.rfind("dec.cls", 0) == 0 || p.name.rfind("dec.box", 0) == 0 ||
                              p.name.rfind("enc.head", 0) == 0 || p.name.rfind("dec.norm", 0) == 0;
            for (double g : p.grad.data()) {
                if (head) {
                    EXPECT_EQ(g, 0.0) << p.name;
                }
                if (p.name.find(".sa.q.") != std::string::npos && g != 0.0) attention_moved = true;
            }
        }
        EXPECT_TRUE(attention_moved);
    }
}

TEST(FeedbackBundle, PermutingQueriesPermutesMapsAndKeepsLosses) {
    DetrModel a(toy_config(), 8);
    randomize(a, 9, 0.3);
    DetrModel b = a;
    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    for (const char* name : {"query.content", "query.anchor"}) {
        const Tensor src = a.params().at(name).value;
        Tensor& dst = b.params().at(name).value;
        for (std::size_t i = 0; i < perm.size(); ++i)
            for (std::size_t c = 0; c < src.cols(); ++c) dst(i, c) = src(perm[i], c);
    }
    std::mt19937_64 rng(10);
    const Tensor x = random_tensor(rng, 9, 5);
    ad::Tape ta, tb;
    const ModelOutput oa = a.forward(ta, x, true), ob = b.forward(tb, x, true);
    for (std::size_t l = 0; l < oa.decoder_self.size(); ++l) {
        const Tensor& sa = oa.decoder_self[l].map.value();
        const Tensor& sb = ob.decoder_self[l].map.value();
        const Tensor& ca = oa.decoder_cross[l].map.value();
        const Tensor& cb = ob.decoder_cross[l].map.value();
        for (std::size_t i = 0; i < perm.size(); ++i) {
            for (std::size_t j = 0; j < perm.size(); ++j) EXPECT_NEAR(sb(i, j), sa(perm[i], perm[j]), 1e-12);
            for (std::size_t k = 0; k < ca.cols(); ++k) EXPECT_NEAR(cb(i, k), ca(perm[i], k), 1e-12);
        }
    }
    const FeedbackLosses la = feedback_bundle(ta, oa, FeedbackConfig{});
    const FeedbackLosses lb = feedback_bundle(tb, ob, FeedbackConfig{});
    EXPECT_NEAR(item(la.encoder_sa), item(lb.encoder_sa), 1e-12);
    EXPECT_NEAR(item(la.decoder_sa), item(lb.decoder_sa), 1e-12);
    EXPECT_NEAR(item(la.decoder_ca), item(lb.decoder_ca), 1e-12);
}
