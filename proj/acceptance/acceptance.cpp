// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// here and not configurable.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "feedback_fixtures.hpp"
#include "oracles.hpp"
#include "pfdetr/training.hpp"

namespace fs = std::filesystem;
using namespace pfdetr;
using namespace pfdetr::testing;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kEndToEndEps = 1e-4;
constexpr double kFixedPointTol = 1e-9;
constexpr double kCollapsedFloor = 0.5;
constexpr double kRankOneTol = 1e-9;
constexpr double kGridTol = 1e-3;
constexpr double kDiversityMargin = 0.1;
constexpr double kOverfitMap = 0.9;

constexpr std::size_t kTrendSeeds = 3;
constexpr std::size_t kTrendTrain = 200;
constexpr std::size_t kTrendTest = 50;
constexpr std::size_t kTrendEpochs = 20;
constexpr std::size_t kOverfitVideos = 8;
constexpr std::size_t kOverfitEpochs = 200;

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Settings {
    fs::path work;
    std::size_t seeds = kTrendSeeds;
    bool reuse = false;
};

// ---- seconds-scale criteria ---------------------------------------------

Verdict gradient_suite() {
    double worst = 0.0;
    std::string where;
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        for (auto& c : primitive_cases(seed)) {
            const double e = ad::finite_diff_check(c.fn, c.store);
            ++checked;
            if (e > worst) worst = e, where = c.name;
        }
    }
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
        for (auto target : {FeedbackTarget::PredictionRelation, FeedbackTarget::CrossAttentionGuidance,
                            FeedbackTarget::IntervalOccupancy}) {
            GradientCase c = end_to_end_case(seed, target);
            const double e = ad::finite_diff_check(c.fn, c.store, kEndToEndEps);
            ++checked;
            if (e > worst) worst = e, where = fmt::format("end_to_end/{}/s{}", to_string(target), seed);
        }
    }
    return {worst < kGradTol, fmt::format("{} cases, max rel err {:.3g} ({})", checked, worst, where)};
}

Verdict matching_oracle() {
    std::mt19937_64 rng(2024);
    std::size_t mismatches = 0, total = 0;
    for (std::size_t n = 1; n <= 7; ++n) {
        for (std::size_t m = 1; m <= n; ++m) {
            for (int trial = 0; trial < 100; ++trial) {
                // integer costs make the equality exact
                Tensor cost(m, n);
                for (double& v : cost.data()) v = static_cast<double>(rng() % 201) - 100.0;
                const auto pairs = hungarian(cost);
                double got = 0.0;
                for (const auto& [r, c] : pairs.pairs) got += cost(r, c);
                ++total;
                if (pairs.size() != m || got != brute_force_assignment(cost)) ++mismatches;
            }
        }
    }
    return {mismatches == 0, fmt::format("{} matrices, {} mismatches", total, mismatches)};
}

Verdict iou_properties() {
    const double L = 3.0;
    const Tensor h = iou_matrix({{0.0, 0.5}, {0.0, 0.5}, {0.6, 0.9}, {0.0 / L, 2.0 / L}, {1.0 / L, 3.0 / L}});
    bool ok = h(0, 1) == 1.0 && h(0, 2) == 0.0 && std::abs(h(3, 4) - 1.0 / 3.0) < 1e-15 &&
              std::abs(h(4, 3) - 1.0 / 3.0) < 1e-15;
    const bool hand = ok;
    std::mt19937_64 rng(17);
    std::size_t bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Interval> iv(random_size(rng, 1, 12));
        for (auto& x : iv) x = random_interval(rng, 0.0);
        const Tensor m = iou_matrix(iv);
        for (std::size_t i = 0; i < iv.size(); ++i) {
            if (m(i, i) != 1.0) ++bad;
            for (std::size_t j = 0; j < iv.size(); ++j)
                if (m(i, j) != m(j, i) || m(i, j) < 0.0 || m(i, j) > 1.0) ++bad;
        }
    }
    ok = ok && bad == 0;
    return {ok, fmt::format("hand fixtures {}, 1000 random sets with {} violations", hand ? "exact" : "WRONG", bad)};
}

double item(ad::Var v) { return v.value().item(); }

Verdict feedback_fixed_point() {
    double worst_fixed = 0.0;
    for (auto [groups, size] : {std::pair<std::size_t, std::size_t>{2, 3}, {3, 2}, {4, 5}, {1, 6}}) {
        FeedbackFixture f;
        build_fixed_point(f, groups, size);
        const FeedbackLosses l = feedback_bundle(f.tape, f.out, FeedbackConfig{});
        worst_fixed = std::max({worst_fixed, item(l.encoder_sa), item(l.decoder_sa), item(l.decoder_ca)});
    }
    FeedbackFixture f;
    build_collapsed(f, 8, 12);
    const FeedbackLosses l = feedback_bundle(f.tape, f.out, FeedbackConfig{});
    const double least = std::min({item(l.encoder_sa), item(l.decoder_sa), item(l.decoder_ca)});
    return {worst_fixed < kFixedPointTol && least > kCollapsedFloor,
            fmt::format("fixed point max {:.3g}, collapsed min {:.4f}", worst_fixed, least)};
}

Verdict stop_gradient() {
    ModelConfig mc;
    mc.input_dim = 5;
    mc.model_dim = 8;
    mc.heads = 2;
    mc.ffn_dim = 8;
    mc.encoder_layers = 2;
    mc.decoder_layers = 3;
    mc.queries = 4;
    mc.classes = 2;
    DetrModel m(mc, 4);
    std::mt19937_64 rng(5);
    for (auto& p : m.params())
        for (double& v : p.value.data()) v += 0.2 * (2.0 * uniform01(rng) - 1.0);
    const Tensor x = random_tensor(rng, 10, mc.input_dim);
    std::size_t nonzero = 0, head_params = 0;
    bool attention_moved = false;
    for (auto target : {FeedbackTarget::PredictionRelation, FeedbackTarget::CrossAttentionGuidance,
                        FeedbackTarget::IntervalOccupancy}) {
        m.params().zero_grad();
        ad::Tape t;
        const ModelOutput out = m.forward(t, x, true);
        FeedbackConfig cfg;
        cfg.target = target;
        const FeedbackLosses l = feedback_bundle(t, out, cfg);
        t.backward(ad::add(ad::add(l.encoder_sa, l.decoder_sa), l.decoder_ca));
        t.accumulate_param_grads(m.params());
        for (const auto& p : m.params()) {
            const bool head = p.name.rfind("dec.cls", 0) == 0 || p.name.rfind("dec.box", 0) == 0 ||
                              p.name.rfind("enc.head", 0) == 0 || p.name.rfind("dec.norm", 0) == 0;
            if (head) head_params += p.grad.size();
            for (double g : p.grad.data()) {
                if (head && g != 0.0) ++nonzero;
                if (!head && g != 0.0) attention_moved = true;
            }
        }
    }
    return {nonzero == 0 && head_params > 0 && attention_moved,
            fmt::format("{} nonzero of {} head gradient entries, attention gradients {}", nonzero, head_params,
                        attention_moved ? "present" : "ABSENT")};
}

Verdict diversity_metric() {
    std::mt19937_64 rng(99);
    double worst_rank1 = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = random_size(rng, 1, 12), cols = random_size(rng, 1, 12);
        const Tensor a = random_stochastic(rng, 1, cols);
        Tensor m(rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) m(r, c) = a(0, c);
        worst_rank1 = std::max(worst_rank1, diversity(m));
    }
    double worst_gap = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor a = random_stochastic(rng, 3, 3);
        const double got = rank1_residual(a, rank1_minimizer(a));
        worst_gap = std::max(worst_gap, got - grid_rank1_oracle(a));
    }
    std::size_t broken = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t rows = random_size(rng, 2, 10), cols = random_size(rng, 2, 10);
        const Tensor a = random_stochastic(rng, rows, cols);
        std::vector<std::size_t> perm(rows);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor b(rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) b(r, c) = a(perm[r], c);
        if (diversity(a) != diversity(b)) ++broken;
    }
    return {worst_rank1 < kRankOneTol && worst_gap <= kGridTol && broken == 0,
            fmt::format("rank-1 max {:.3g}, grid gap max {:.3g}, {} permutation mismatches", worst_rank1,
                        worst_gap, broken)};
}

Detection det(const std::string& v, double s, double e, double score) { return {v, {s, e}, 0, score}; }

Verdict post_processing() {
    std::vector<std::string> failed;
    auto out = soft_nms({det("v", 0, 10, 0.9), det("v", 0, 10, 0.6)});
    if (out.size() != 2 || out[0].score != 0.9 || out[1].score != 0.0) failed.push_back("duplicate");
    out = soft_nms({det("v", 0, 10, 0.9), det("v", 0, 5, 0.8)});
    if (out.size() != 2 || out[1].score != 0.4) failed.push_back("half-overlap");

    VideoSample v;
    v.id = "v";
    v.duration = 60.0;
    v.annotations = {{0, {0, 10}}, {0, {20, 30}}};
    const EvalReport r =
        evaluate_map({det("v", 0, 10, 0.9), det("v", 40, 50, 0.8), det("v", 20, 30, 0.7)}, {v}, {"a"}, {0.5});
    if (std::abs(r.ap[0][0] - 5.0 / 6.0) > 1e-15) failed.push_back("pr-curve");

    std::mt19937_64 rng(3);
    std::size_t increased = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Detection> in;
        const std::size_t n = random_size(rng, 0, 40);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = 100.0 * uniform01(rng), len = 1.0 + 20.0 * uniform01(rng);
            in.push_back({rng() % 2 ? "a" : "b", {s, s + len}, static_cast<std::size_t>(rng() % 2), uniform01(rng)});
        }
        std::vector<double> before;
        for (const auto& d : in) before.push_back(d.score);
        std::sort(before.begin(), before.end(), std::greater<>());
        std::vector<double> after;
        for (const auto& d : soft_nms(in)) after.push_back(d.score);
        std::sort(after.begin(), after.end(), std::greater<>());
        // sorted scores dominate elementwise when no score grows
        for (std::size_t i = 0; i < after.size(); ++i)
            if (after.size() != before.size() || after[i] > before[i]) ++increased;
    }
    if (increased) failed.push_back("monotonicity");
    std::string detail = failed.empty() ? "fixtures exact, no score increased" : "failed:";
    for (const auto& f : failed) detail += " " + f;
    return {failed.empty(), detail};
}

// ---- training-scale criteria ----------------------------------------------

RunConfig small_model(RunConfig c) {
    c.model.model_dim = 64;
    c.model.heads = 4;
    c.model.ffn_dim = 128;
    c.model.hybrid_queries = 2 * c.model.queries;
    return c;
}

void feedback_off(RunConfig& c) { c.feedback.encoder_sa = c.feedback.decoder_sa = c.feedback.decoder_ca = 0.0; }

Verdict determinism(const Settings& s) {
    RunConfig c = small_model(RunConfig{});
    c.synth.videos = 6;
    c.epochs = 2;
    c.warmup_epochs = 1;
    c.batch_size = 2;
    c.probe_size = 2;
    c.seed = 11;
    const Dataset data = synth_generate(c.synth_spec());
    std::vector<std::string> csv;
    for (int run = 0; run < 2; ++run) {
        const fs::path dir = s.work / "determinism" / fmt::format("run{}", run);
        fs::remove_all(dir);
        DetrModel model(c.model_config(), c.seed);
        TrainOptions opts;
        opts.out_dir = dir;
        train(model, c, data, data, opts);
        std::ifstream is(dir / "metrics.csv", std::ios::binary);
        std::stringstream ss;
        ss << is.rdbuf();
        csv.push_back(ss.str());
    }
    const bool same = !csv[0].empty() && csv[0] == csv[1];
    return {same, fmt::format("two runs, metrics.csv {} ({} bytes)", same ? "bit-identical" : "DIFFERS",
                              csv[0].size())};
}

Verdict overfit(const Settings& s) {
    RunConfig c = small_model(RunConfig{});
    c.synth.videos = kOverfitVideos;
    c.seed = 3;
    c.epochs = kOverfitEpochs;
    c.warmup_epochs = 5;
    c.batch_size = 2;
    c.lr = 5e-4;
    c.weight_decay = 0.0;
    c.probe_size = kOverfitVideos;
    c.thresholds = {0.5};
    const Dataset data = synth_generate(c.synth_spec());
    DetrModel model(c.model_config(), c.seed);
    double best = 0.0;
    std::size_t reached = 0;
    TrainOptions opts;
    opts.out_dir = s.work / "overfit";
    // probe_map is mAP@0.5 on the training videos here
    opts.on_epoch = [&](const EpochMetrics& m) {
        best = std::max(best, m.probe_map);
        if (!reached && m.probe_map >= kOverfitMap) reached = m.epoch;
    };
    opts.stop_after = [&](const EpochMetrics&) { return reached > 0; };
    train(model, c, data, data, opts);
    const double final_map = evaluate_model(model, data, c).average_map;
    return {reached > 0,
            fmt::format("mAP@0.5 >= {:.1f} first at epoch {} of {}, best {:.4f}, final {:.4f}", kOverfitMap,
                        reached ? std::to_string(reached) : "never", kOverfitEpochs, best, final_map)};
}

struct ArmResult {
    double ca_diversity = 0.0;
    double average_map = 0.0;
};

RunConfig trend_config(std::size_t seed, bool feedback) {
    RunConfig c = small_model(RunConfig{});
    c.seed = seed;
    c.epochs = kTrendEpochs;
    c.warmup_epochs = 5;
    c.batch_size = 4;
    c.lr = 2e-3;
    // only steers best.ckpt; the criteria score final.ckpt
    c.probe_size = 2;
    if (!feedback) feedback_off(c);
    return c;
}

Dataset trend_data(std::size_t seed, bool test) {
    SyntheticSpec spec;
    spec.videos = test ? kTrendTest : kTrendTrain;
    spec.seed = 1000 + 2 * seed + (test ? 1 : 0);
    return synth_generate(spec);
}

double last_ca_diversity(const DetrModel& model, const Dataset& data, const RunConfig& c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& v : data.videos)
        for (const auto& w : prepare_sequence(v.features, c.mode, c.window, c.overlap))
            for (const AttentionMap& m : inference_maps(model, w.features))
                if (m.kind == AttnKind::DecoderCross && m.layer + 1 == c.model.decoder_layers) {
                    sum += diversity(m.matrix);
                    ++n;
                }
    return sum / static_cast<double>(n);
}

ArmResult run_arm(const Settings& s, std::size_t seed, bool feedback, const Dataset& train_set,
                  const Dataset& test_set) {
    const RunConfig c = trend_config(seed, feedback);
    const fs::path dir = s.work / "trend" / fmt::format("seed{}", seed) / (feedback ? "feedback" : "baseline");
    DetrModel model(c.model_config(), c.seed);
    const fs::path ckpt = dir / "final.ckpt";
    if (s.reuse && fs::exists(ckpt) && fs::exists(dir / "config.txt") &&
        RunConfig::load(dir / "config.txt").to_text() == c.to_text()) {
        model.params().load(ckpt);
    } else {
        fs::remove_all(dir);
        TrainOptions opts;
        opts.out_dir = dir;
        const auto t0 = std::chrono::steady_clock::now();
        train(model, c, train_set, train_set, opts);
        const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
        std::fprintf(stderr, "  seed %zu %s trained in %.1f min\n", seed, feedback ? "feedback" : "baseline",
                     minutes);
    }
    ArmResult r;
    r.ca_diversity = last_ca_diversity(model, test_set, c);
    r.average_map = evaluate_model(model, test_set, c).average_map;
    std::ofstream(dir / "acceptance.txt") << fmt::format("ca_diversity = {:.17g}\naverage_map = {:.17g}\n",
                                                         r.ca_diversity, r.average_map);
    return r;
}

struct TrendResults {
    std::vector<ArmResult> baseline, feedback;
};

const TrendResults& trend_results(const Settings& s) {
    static TrendResults r;
    static bool done = false;
    if (!done) {
        for (std::size_t seed = 0; seed < s.seeds; ++seed) {
            const Dataset train_set = trend_data(seed, false), test_set = trend_data(seed, true);
            r.baseline.push_back(run_arm(s, seed, false, train_set, test_set));
            r.feedback.push_back(run_arm(s, seed, true, train_set, test_set));
        }
        done = true;
    }
    return r;
}

Verdict diversity_trend(const Settings& s) {
    const TrendResults& r = trend_results(s);
    bool ok = !r.baseline.empty();
    std::string detail = "last-layer CA diversity baseline/feedback:";
    for (std::size_t i = 0; i < r.baseline.size(); ++i) {
        const double b = r.baseline[i].ca_diversity, f = r.feedback[i].ca_diversity;
        ok = ok && f >= b + kDiversityMargin;
        detail += fmt::format(" s{} {:.3f}/{:.3f}", i, b, f);
    }
    return {ok, detail};
}

Verdict map_trend(const Settings& s) {
    const TrendResults& r = trend_results(s);
    double mb = 0.0, mf = 0.0;
    std::string detail;
    for (std::size_t i = 0; i < r.baseline.size(); ++i) {
        mb += r.baseline[i].average_map / static_cast<double>(r.baseline.size());
        mf += r.feedback[i].average_map / static_cast<double>(r.feedback.size());
        detail += fmt::format(" s{} {:.4f}/{:.4f}", i, r.baseline[i].average_map, r.feedback[i].average_map);
    }
    return {!r.baseline.empty() && mf - mb > 0.0,
            fmt::format("mean avg mAP baseline {:.4f}, feedback {:.4f} (improvement {:+.4f});{}", mb, mf, mf - mb,
                        detail)};
}

struct Criterion {
    std::string name;
    bool slow;
    std::function<Verdict(const Settings&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pfdetr acceptance suite"};
    Settings s;
    std::string work = "acceptance_work";
    bool quick = false;
    std::vector<std::string> only;
    app.add_option("--work", work, "directory for training outputs");
    app.add_flag("--quick", quick, "skip the training-scale criteria");
    app.add_option("--only", only, "run only the named criteria");
    app.add_option("--seeds", s.seeds, "seeds for the trend criteria")->check(CLI::Range(1, 10));
    app.add_flag("--reuse", s.reuse, "load trend checkpoints from --work when their config matches");
    CLI11_PARSE(app, argc, argv);
    s.work = work;

    const std::vector<Criterion> criteria = {
        {"gradient-suite", false, [](const Settings&) { return gradient_suite(); }},
        {"matching-oracle", false, [](const Settings&) { return matching_oracle(); }},
        {"iou-matrix", false, [](const Settings&) { return iou_properties(); }},
        {"feedback-fixed-point", false, [](const Settings&) { return feedback_fixed_point(); }},
        {"stop-gradient", false, [](const Settings&) { return stop_gradient(); }},
        {"diversity-metric", false, [](const Settings&) { return diversity_metric(); }},
        {"diversity-trend", true, diversity_trend},
        {"map-trend", true, map_trend},
        {"overfit", true, overfit},
        {"post-processing", false, [](const Settings&) { return post_processing(); }},
        {"determinism", false, determinism},
    };

    std::size_t failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
        if (quick && c.slow) {
            std::printf("SKIP %-22s --quick\n", c.name.c_str());
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run(s);
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %-22s %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", c.name.c_str(), v.detail.c_str(), sec);
        std::fflush(stdout);
        failed += !v.pass;
    }
    return failed ? 1 : 0;
}
