#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner: brute-force assignment search, dense grid search for
// the rank-1 residual, and per-primitive finite-difference cases.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfdetr/autodiff.hpp"
#include "pfdetr/diversity.hpp"
#include "pfdetr/matching.hpp"
#include "pfdetr/model.hpp"
#include "test_support.hpp"

namespace pfdetr::testing {

/// Minimum total cost of assigning every row to a distinct column, by
/// enumerating all ordered column selections.
inline double brute_force_assignment(const Tensor& cost) {
    const std::size_t m = cost.rows(), n = cost.cols();
    std::vector<std::size_t> cols(n);
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    // Every permutation of the columns; the first m entries give one injective map.
    // Duplicated prefixes are harmless for a minimum.
    do {
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) s += cost(r, cols[r]);
        best = std::min(best, s);
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
}

/// Dense grid search of min_a ‖A − 𝟙aᵀ‖ for a 3-column matrix, refined
/// around the best grid point twice. The residual is computed directly
/// from its definition.
inline double grid_rank1_oracle(const Tensor& a, std::size_t steps = 120) {
    if (a.cols() != 3) throw std::invalid_argument("grid_rank1_oracle: needs 3 columns");
    auto residual = [&](const double* row) {
        double max_col = 0.0, max_row = 0.0;
        double cols[3] = {0.0, 0.0, 0.0};
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double r = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
                const double d = std::abs(a(i, j) - row[j]);
                cols[j] += d;
                r += d;
            }
            max_row = std::max(max_row, r);
        }
        for (double c : cols) max_col = std::max(max_col, c);
        return std::sqrt(max_col * max_row);
    };
    double lo[3], hi[3];
    for (std::size_t j = 0; j < 3; ++j) {
        lo[j] = hi[j] = a(0, j);
        for (std::size_t i = 1; i < a.rows(); ++i) {
            lo[j] = std::min(lo[j], a(i, j));
            hi[j] = std::max(hi[j], a(i, j));
        }
    }
    double best = std::numeric_limits<double>::infinity();
    double arg[3] = {lo[0], lo[1], lo[2]};
    for (int round = 0; round < 3; ++round) {
        double step[3];
        for (std::size_t j = 0; j < 3; ++j) step[j] = (hi[j] - lo[j]) / static_cast<double>(steps);
        double row[3];
        for (std::size_t i0 = 0; i0 <= steps; ++i0)
            for (std::size_t i1 = 0; i1 <= steps; ++i1)
                for (std::size_t i2 = 0; i2 <= steps; ++i2) {
                    row[0] = lo[0] + step[0] * static_cast<double>(i0);
                    row[1] = lo[1] + step[1] * static_cast<double>(i1);
                    row[2] = lo[2] + step[2] * static_cast<double>(i2);
                    const double v = residual(row);
                    if (v < best) {
                        best = v;
                        std::copy(row, row + 3, arg);
                    }
                }
        for (std::size_t j = 0; j < 3; ++j) {
            lo[j] = arg[j] - 2.0 * step[j];
            hi[j] = arg[j] + 2.0 * step[j];
        }
    }
    return best;
}

struct GradientCase {
    std::string name;
    ad::ParamStore store;
    ad::LossFn fn;
};

/// Σ W ⊙ y with a fixed random weight so every output coordinate matters.
inline ad::Var weighted_sum(ad::Var y, const Tensor& w) {
    return ad::sum(ad::mul(y, y.tape->constant(w)));
}

/// One finite-difference case per autodiff primitive, with shapes drawn up
/// to 8×8 from `seed`. Inputs avoid kinks of abs/relu/clamp/min/max.
inline std::vector<GradientCase> primitive_cases(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto dim = [&] { return random_size(rng, 1, 8); };
    std::vector<GradientCase> cases;

    auto unary = [&](std::string name, Tensor x, std::function<ad::Var(ad::Var)> op) {
        GradientCase c{std::move(name), {}, {}};
        c.store.add("x", std::move(x));
        Tensor probe;
        {
            ad::Tape t;
            probe = op(t.param(c.store, "x")).value();
        }
        const Tensor w = random_tensor(rng, probe.rows(), probe.cols());
        c.fn = [op, w](ad::Tape& t, const ad::ParamStore& s) { return weighted_sum(op(t.param(s, "x")), w); };
        cases.push_back(std::move(c));
    };
    auto binary = [&](std::string name, Tensor a, Tensor b, std::function<ad::Var(ad::Var, ad::Var)> op) {
        GradientCase c{std::move(name), {}, {}};
        c.store.add("a", std::move(a));
        c.store.add("b", std::move(b));
        Tensor probe;
        {
            ad::Tape t;
            probe = op(t.param(c.store, "a"), t.param(c.store, "b")).value();
        }
        const Tensor w = random_tensor(rng, probe.rows(), probe.cols());
        c.fn = [op, w](ad::Tape& t, const ad::ParamStore& s) {
            return weighted_sum(op(t.param(s, "a"), t.param(s, "b")), w);
        };
        cases.push_back(std::move(c));
    };

    const std::size_t m = dim(), n = dim(), k = dim();
    binary("matmul", random_tensor(rng, m, k), random_tensor(rng, k, n), ad::matmul);
    binary("matmul_nt", random_tensor(rng, m, k), random_tensor(rng, n, k), ad::matmul_nt);
    unary("transpose", random_tensor(rng, m, n), ad::transpose);
    binary("add", random_tensor(rng, m, n), random_tensor(rng, m, n), ad::add);
    binary("sub", random_tensor(rng, m, n), random_tensor(rng, m, n), ad::sub);
    binary("mul", random_tensor(rng, m, n), random_tensor(rng, m, n), ad::mul);
    binary("div", random_tensor(rng, m, n), random_tensor(rng, m, n, 0.5, 1.5), ad::div);
    binary("add_row", random_tensor(rng, m, n), random_tensor(rng, 1, n), ad::add_row);
    unary("scale", random_tensor(rng, m, n), [](ad::Var x) { return ad::scale(x, -1.7); });
    unary("add_scalar", random_tensor(rng, m, n), [](ad::Var x) { return ad::add_scalar(x, 0.3); });
    unary("exp", random_tensor(rng, m, n), [](ad::Var x) { return ad::exp(x); });
    unary("log", random_tensor(rng, m, n, 0.5, 2.0), [](ad::Var x) { return ad::log(x); });
    unary("sqrt", random_tensor(rng, m, n, 0.5, 2.0), [](ad::Var x) { return ad::sqrt(x); });
    unary("sigmoid", random_tensor(rng, m, n, -3.0, 3.0), [](ad::Var x) { return ad::sigmoid(x); });
    unary("gelu", random_tensor(rng, m, n, -3.0, 3.0), [](ad::Var x) { return ad::gelu(x); });
    unary("relu", away_from_zero(rng, m, n), [](ad::Var x) { return ad::relu(x); });
    unary("abs", away_from_zero(rng, m, n), [](ad::Var x) { return ad::abs(x); });
    {
        // Bands (-1,-0.35), (-0.25,0.25), (0.35,1) keep clear of the ±0.3 bounds.
        Tensor x(m, n);
        for (double& v : x.data()) {
            const double u = uniform01(rng), r = uniform01(rng);
            v = u < 1.0 / 3 ? -0.35 - 0.65 * r : (u < 2.0 / 3 ? -0.25 + 0.5 * r : 0.35 + 0.65 * r);
        }
        unary("clamp", std::move(x), [](ad::Var v) { return ad::clamp(v, -0.3, 0.3); });
    }
    {
        Tensor a = random_tensor(rng, m, n);
        Tensor b = a;
        const Tensor gap = away_from_zero(rng, m, n);
        for (std::size_t i = 0; i < b.size(); ++i) b[i] += gap[i];
        binary("minimum", a, b, ad::minimum);
        binary("maximum", a, b, ad::maximum);
    }
    {
        const std::size_t w = std::max<std::size_t>(2, n);
        GradientCase c{"layer_norm", {}, {}};
        c.store.add("x", random_tensor(rng, m, w, -2.0, 2.0));
        c.store.add("g", random_tensor(rng, 1, w, 0.5, 1.5));
        c.store.add("b", random_tensor(rng, 1, w));
        const Tensor wt = random_tensor(rng, m, w);
        c.fn = [wt](ad::Tape& t, const ad::ParamStore& s) {
            return weighted_sum(ad::layer_norm(t.param(s, "x"), t.param(s, "g"), t.param(s, "b")), wt);
        };
        cases.push_back(std::move(c));
    }
    unary("softmax_rows", random_tensor(rng, m, n, -2.0, 2.0), [](ad::Var x) { return ad::softmax_rows(x); });
    {
        const std::size_t w = std::max<std::size_t>(2, n);
        Tensor mask(m, w);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c)
                if (c != r % w && uniform01(rng) < 0.4) mask(r, c) = -std::numeric_limits<double>::infinity();
        unary("softmax_rows_masked", random_tensor(rng, m, w, -2.0, 2.0),
              [mask](ad::Var x) { return ad::softmax_rows(x, &mask); });
    }
    binary("concat_cols", random_tensor(rng, m, n), random_tensor(rng, m, k),
           [](ad::Var a, ad::Var b) { return ad::concat_cols({a, b, a}); });
    binary("concat_rows", random_tensor(rng, m, n), random_tensor(rng, k, n),
           [](ad::Var a, ad::Var b) { return ad::concat_rows({b, a}); });
    {
        const std::size_t rows = std::max<std::size_t>(2, m), cols = std::max<std::size_t>(2, n);
        unary("slice_rows", random_tensor(rng, rows, n), [rows](ad::Var x) { return ad::slice_rows(x, 1, rows); });
        unary("slice_cols", random_tensor(rng, m, cols), [cols](ad::Var x) { return ad::slice_cols(x, 0, cols - 1); });
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < rows + 2; ++i) idx.push_back(random_size(rng, 0, rows - 1));
        unary("gather_rows", random_tensor(rng, rows, n), [idx](ad::Var x) { return ad::gather_rows(x, idx); });
    }
    unary("sum", random_tensor(rng, m, n), [](ad::Var x) { return ad::sum(x); });
    unary("mean", random_tensor(rng, m, n), [](ad::Var x) { return ad::mean(x); });
    unary("row_normalize", random_tensor(rng, m, n, 0.1, 1.0), [](ad::Var x) { return ad::row_normalize(x); });
    {
        const Tensor target = random_stochastic(rng, m, n);
        unary("kl_div_rows", random_tensor(rng, m, n, -1.0, 1.0),
              [target](ad::Var x) { return ad::kl_div_rows(ad::softmax_rows(x), target); });
    }
    {
        const Tensor target = random_tensor(rng, m, n, 0.0, 1.0);
        unary("bce_with_logits", random_tensor(rng, m, n, -3.0, 3.0),
              [target](ad::Var x) { return ad::bce_with_logits(x, target); });
    }
    return cases;
}

/// Full training objective of a toy model (T=4, D=8, three queries) with
/// hybrid, two-stage, stable matching and all feedback terms on. Detached
/// targets are recorded on the first evaluation and replayed afterwards.
inline GradientCase end_to_end_case(std::uint64_t seed, FeedbackTarget target = FeedbackTarget::PredictionRelation) {
    ModelConfig mc;
    mc.input_dim = 3;
    mc.model_dim = 8;
    mc.heads = 2;
    mc.ffn_dim = 8;
    mc.encoder_layers = 1;
    mc.decoder_layers = 2;
    mc.queries = 3;
    mc.classes = 2;
    mc.hybrid_queries = 6;
    auto model = std::make_shared<DetrModel>(mc, seed);
    std::mt19937_64 rng(seed + 17);
    const Tensor features = random_tensor(rng, 4, mc.input_dim);
    const std::vector<GroundTruthAction> gts{{0, {0.1, 0.45}}, {1, {0.5, 0.9}}};
    auto cache = std::make_shared<TargetCache>();
    ObjectiveOptions opts;
    opts.feedback.target = target;
    GradientCase c{"end_to_end", std::move(model->params()), {}};
    c.fn = [model, features, gts, cache, opts](ad::Tape& t, const ad::ParamStore& s) mutable {
        // The model reads its weights from the store under test.
        model->params() = s;
        cache->rewind();
        opts.targets = cache.get();
        t.set_replay(cache.get());
        const ModelOutput out = model->forward(t, features, true);
        return compute_objective(t, out, gts, opts).total;
    };
    return c;
}

}  // namespace pfdetr::testing
