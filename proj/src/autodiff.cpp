#include "pfdetr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pfdetr/binary_io.hpp"
#include "pfdetr/kernels.hpp"

namespace pfdetr::ad {

namespace kn = pfdetr::kernels;

namespace {

[[noreturn]] void shape_error(std::string_view what, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

Tape& tape_of(Var a) {
    if (!a.valid()) throw std::invalid_argument("operation on an unbound Var");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
    return tape_of(a);
}

void check_same(std::string_view what, Var a, Var b) {
    if (!a.value().same_shape(b.value())) shape_error(what, a.value(), b.value());
}

void require_finite(std::string_view what, const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite input");
}

void check_stochastic_rows(std::string_view what, const Tensor& t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
        double s = 0.0;
        for (double v : t.row(r)) s += v;
        if (std::abs(s - 1.0) > kRowSumTolerance)
            throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) +
                                        " sums to " + std::to_string(s));
    }
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(Op op, Var a, F f, D dfdx) {
    Tape& t = tape_of(a);
    const Tensor& x = a.value();
    Tensor y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    const int ia = a.id;
    return t.record(op, {ia}, std::move(y), [ia, dfdx](Tape& tp, int self) {
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(self);
        const Tensor& gy = tp.grad_buffer(self);
        Tensor& gx = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
    });
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

std::string_view op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Param: return "param";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::MatMulNT: return "matmul_nt";
        case Op::Transpose: return "transpose";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::AddRow: return "add_row";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Sigmoid: return "sigmoid";
        case Op::Gelu: return "gelu";
        case Op::Relu: return "relu";
        case Op::Abs: return "abs";
        case Op::Clamp: return "clamp";
        case Op::Minimum: return "minimum";
        case Op::Maximum: return "maximum";
        case Op::LayerNorm: return "layer_norm";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::ConcatCols: return "concat_cols";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceRows: return "slice_rows";
        case Op::SliceCols: return "slice_cols";
        case Op::GatherRows: return "gather_rows";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::RowNormalize: return "row_normalize";
        case Op::KlDivRows: return "kl_div_rows";
        case Op::BceWithLogits: return "bce_with_logits";
    }
    return "?";
}

const Tensor& Var::value() const {
    if (!valid()) throw std::invalid_argument("value of an unbound Var");
    return tape->value(id);
}

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const ParamStore& store, std::size_t index) {
    Node n;
    n.op = Op::Param;
    n.value = store[index].value;
    n.requires_grad = true;
    n.param_index = static_cast<std::ptrdiff_t>(index);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const ParamStore& store, std::string_view name) {
    return param(store, store.index_of(name));
}

Var Tape::stop_gradient(Var x) {
    return constant(cached(replay_, [&] { return x.value(); }));
}

Var Tape::record(Op op, std::vector<int> inputs, Tensor value, BackwardFn backward) {
    Node n;
    n.op = op;
    for (int id : inputs) {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::logic_error("tape input precedes no recorded node");
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss is not on this tape");
    if (value(loss).size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + value(loss).shape_str());
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, id);
    }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
    for (const auto& n : nodes_) {
        if (n.param_index < 0 || n.grad.empty()) continue;
        Param& p = store[static_cast<std::size_t>(n.param_index)];
        if (p.grad.empty()) p.grad = Tensor(p.value.rows(), p.value.cols());
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
}

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.cols() != B.rows()) shape_error("matmul", A, B);
    const kn::GemmShape s{A.rows(), B.cols(), A.cols()};
    Tensor C(s.m, s.n);
    kn::parallel::gemm(kn::Trans::No, kn::Trans::No, s, A.data(), B.data(), C.data(), false);
    const int ia = a.id, ib = b.id;
    return t.record(Op::MatMul, {ia, ib}, std::move(C), [ia, ib, s](Tape& tp, int self) {
        const Tensor& gC = tp.grad_buffer(self);
        if (tp.requires_grad(ia))
            kn::parallel::gemm(kn::Trans::No, kn::Trans::Yes, {s.m, s.k, s.n}, gC.data(),
                               tp.value(ib).data(), tp.grad_buffer(ia).data(), true);
        if (tp.requires_grad(ib))
            kn::parallel::gemm(kn::Trans::Yes, kn::Trans::No, {s.k, s.n, s.m},
                               tp.value(ia).data(), gC.data(), tp.grad_buffer(ib).data(), true);
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.cols() != B.cols()) shape_error("matmul_nt", A, B);
    const kn::GemmShape s{A.rows(), B.rows(), A.cols()};
    Tensor C(s.m, s.n);
    kn::parallel::gemm(kn::Trans::No, kn::Trans::Yes, s, A.data(), B.data(), C.data(), false);
    const int ia = a.id, ib = b.id;
    return t.record(Op::MatMulNT, {ia, ib}, std::move(C), [ia, ib, s](Tape& tp, int self) {
        const Tensor& gC = tp.grad_buffer(self);
        if (tp.requires_grad(ia))
            kn::parallel::gemm(kn::Trans::No, kn::Trans::No, {s.m, s.k, s.n}, gC.data(),
                               tp.value(ib).data(), tp.grad_buffer(ia).data(), true);
        if (tp.requires_grad(ib))
            kn::parallel::gemm(kn::Trans::Yes, kn::Trans::No, {s.n, s.k, s.m}, gC.data(),
                               tp.value(ia).data(), tp.grad_buffer(ib).data(), true);
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    const int ia = a.id;
    return t.record(Op::Transpose, {ia}, a.value().transposed(), [ia](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) += g(r, c);
    });
}

// ---- elementwise binary ----------------------------------------------------

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("add", a, b);
    Tensor y = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
    const int ia = a.id, ib = b.id;
    return t.record(Op::Add, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        for (int in : {ia, ib}) {
            if (!tp.requires_grad(in)) continue;
            Tensor& gi = tp.grad_buffer(in);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("sub", a, b);
    Tensor y = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= B[i];
    const int ia = a.id, ib = b.id;
    return t.record(Op::Sub, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(ib)) {
            Tensor& gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("mul", a, b);
    Tensor y = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= B[i];
    const int ia = a.id, ib = b.id;
    return t.record(Op::Mul, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        if (tp.requires_grad(ia)) {
            const Tensor& B = tp.value(ib);
            Tensor& ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (tp.requires_grad(ib)) {
            const Tensor& A = tp.value(ia);
            Tensor& gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
    });
}

Var div(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("div", a, b);
    Tensor y = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= B[i];
    const int ia = a.id, ib = b.id;
    return t.record(Op::Div, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& B = tp.value(ib);
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / B[i];
        }
        if (tp.requires_grad(ib)) {
            const Tensor& Y = tp.value(self);
            Tensor& gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * Y[i] / B[i];
        }
    });
}

Var add_row(Var a, Var row) {
    Tape& t = tape_of(a, row);
    const Tensor& A = a.value();
    const Tensor& R = row.value();
    if (R.rows() != 1 || R.cols() != A.cols()) shape_error("add_row", A, R);
    Tensor y = A;
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += R[c];
    const int ia = a.id, ir = row.id;
    return t.record(Op::AddRow, {ia, ir}, std::move(y), [ia, ir](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(ir)) {
            Tensor& gr = tp.grad_buffer(ir);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
        }
    });
}

Var minimum(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("minimum", a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    Tensor y(A.rows(), A.cols());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::min(A[i], B[i]);
    const int ia = a.id, ib = b.id;
    return t.record(Op::Minimum, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& A = tp.value(ia);
        const Tensor& B = tp.value(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const int to = A[i] <= B[i] ? ia : ib;
            if (tp.requires_grad(to)) tp.grad_buffer(to)[i] += g[i];
        }
    });
}

Var maximum(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check_same("maximum", a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    Tensor y(A.rows(), A.cols());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(A[i], B[i]);
    const int ia = a.id, ib = b.id;
    return t.record(Op::Maximum, {ia, ib}, std::move(y), [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& A = tp.value(ia);
        const Tensor& B = tp.value(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const int to = A[i] >= B[i] ? ia : ib;
            if (tp.requires_grad(to)) tp.grad_buffer(to)[i] += g[i];
        }
    });
}

// ---- elementwise unary -----------------------------------------------------

Var scale(Var a, double s) {
    return unary(Op::Scale, a, [s](double x) { return s * x; },
                 [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
    return unary(Op::AddScalar, a, [s](double x) { return x + s; },
                 [](double, double) { return 1.0; });
}

Var exp(Var a) {
    return unary(Op::Exp, a, [](double x) { return std::exp(x); },
                 [](double, double y) { return y; });
}

Var log(Var a) {
    return unary(Op::Log, a, [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
    return unary(Op::Sqrt, a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}

Var sigmoid(Var a) {
    return unary(Op::Sigmoid, a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var a) {
    Tape& t = tape_of(a);
    const Tensor& x = a.value();
    Tensor y(x.rows(), x.cols());
    kn::parallel::gelu(x.data(), y.data());
    const int ia = a.id;
    return t.record(Op::Gelu, {ia}, std::move(y), [ia](Tape& tp, int self) {
        const Tensor& x = tp.value(ia);
        const Tensor& gy = tp.grad_buffer(self);
        Tensor& gx = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * kn::gelu_grad_scalar(x[i]);
    });
}

Var relu(Var a) {
    return unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var abs(Var a) {
    return unary(Op::Abs, a, [](double x) { return std::abs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp(Var a, double lo, double hi) {
    return unary(Op::Clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- normalization ---------------------------------------------------------

Var layer_norm(Var x, Var gamma, Var beta) {
    Tape& t = tape_of(x, gamma);
    tape_of(x, beta);
    const Tensor& X = x.value();
    const std::size_t n = X.cols();
    if (gamma.value().rows() != 1 || gamma.value().cols() != n) shape_error("layer_norm", X, gamma.value());
    if (!gamma.value().same_shape(beta.value())) shape_error("layer_norm", gamma.value(), beta.value());
    Tensor y(X.rows(), n);
    std::vector<double> mu(X.rows()), rstd(X.rows());
    kn::parallel::layer_norm_rows(X.rows(), n, X.data(), gamma.value().data(), beta.value().data(),
                                  y.data(), mu, rstd);
    const int ix = x.id, ig = gamma.id, ib = beta.id;
    return t.record(Op::LayerNorm, {ix, ig, ib}, std::move(y),
                    [ix, ig, ib, mu = std::move(mu), rstd = std::move(rstd)](Tape& tp, int self) {
                        const Tensor& X = tp.value(ix);
                        const Tensor& G = tp.value(ig);
                        const Tensor& gy = tp.grad_buffer(self);
                        const std::size_t n = X.cols();
                        const double inv_n = 1.0 / static_cast<double>(n);
                        const bool need_x = tp.requires_grad(ix);
                        const bool need_g = tp.requires_grad(ig);
                        const bool need_b = tp.requires_grad(ib);
                        std::vector<double> xhat(n), dxhat(n);
                        for (std::size_t r = 0; r < X.rows(); ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t c = 0; c < n; ++c) {
                                xhat[c] = (X(r, c) - mu[r]) * rstd[r];
                                dxhat[c] = gy(r, c) * G[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * xhat[c];
                            }
                            m1 *= inv_n;
                            m2 *= inv_n;
                            if (need_x) {
                                Tensor& gx = tp.grad_buffer(ix);
                                for (std::size_t c = 0; c < n; ++c)
                                    gx(r, c) += rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                            }
                            if (need_g) {
                                Tensor& gg = tp.grad_buffer(ig);
                                for (std::size_t c = 0; c < n; ++c) gg[c] += gy(r, c) * xhat[c];
                            }
                            if (need_b) {
                                Tensor& gb = tp.grad_buffer(ib);
                                for (std::size_t c = 0; c < n; ++c) gb[c] += gy(r, c);
                            }
                        }
                    });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rows() == 0 || x.cols() == 0) throw std::invalid_argument("softmax_rows: empty input");
    require_finite("softmax_rows", x);
    Tensor y(x.rows(), x.cols());
    kn::parallel::softmax_rows(x.rows(), x.cols(), x.data(), y.data());
    return y;
}

Var softmax_rows(Var x, const Tensor* mask) {
    Tape& t = tape_of(x);
    const Tensor& X = x.value();
    Tensor y;
    if (mask != nullptr) {
        if (!mask->same_shape(X)) shape_error("softmax_rows mask", X, *mask);
        require_finite("softmax_rows", X);
        Tensor masked = X;
        for (std::size_t i = 0; i < masked.size(); ++i) masked[i] += (*mask)[i];
        y = Tensor(X.rows(), X.cols());
        kn::parallel::softmax_rows(X.rows(), X.cols(), masked.data(), y.data());
    } else {
        y = softmax_rows(X);
    }
    const int ix = x.id;
    return t.record(Op::SoftmaxRows, {ix}, std::move(y), [ix](Tape& tp, int self) {
        const Tensor& Y = tp.value(self);
        const Tensor& gy = tp.grad_buffer(self);
        Tensor& gx = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < Y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < Y.cols(); ++c) dot += gy(r, c) * Y(r, c);
            for (std::size_t c = 0; c < Y.cols(); ++c) gx(r, c) += Y(r, c) * (gy(r, c) - dot);
        }
    });
}

Var row_normalize(Var a) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    Tensor y(A.rows(), A.cols());
    std::vector<double> sums(A.rows());
    for (std::size_t r = 0; r < A.rows(); ++r) {
        double s = 0.0;
        for (double v : A.row(r)) s += v;
        sums[r] = s;
        for (std::size_t c = 0; c < A.cols(); ++c)
            y(r, c) = s > 0.0 ? A(r, c) / s : 1.0 / static_cast<double>(A.cols());
    }
    const int ia = a.id;
    return t.record(Op::RowNormalize, {ia}, std::move(y),
                    [ia, sums = std::move(sums)](Tape& tp, int self) {
                        const Tensor& Y = tp.value(self);
                        const Tensor& gy = tp.grad_buffer(self);
                        Tensor& ga = tp.grad_buffer(ia);
                        for (std::size_t r = 0; r < Y.rows(); ++r) {
                            if (!(sums[r] > 0.0)) continue;
                            double dot = 0.0;
                            for (std::size_t c = 0; c < Y.cols(); ++c) dot += gy(r, c) * Y(r, c);
                            for (std::size_t c = 0; c < Y.cols(); ++c)
                                ga(r, c) += (gy(r, c) - dot) / sums[r];
                        }
                    });
}

// ---- structural ------------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Tape& t = tape_of(parts.front());
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    std::vector<int> ids;
    for (Var p : parts) {
        tape_of(parts.front(), p);
        if (p.rows() != rows) shape_error("concat_cols", parts.front().value(), p.value());
        cols += p.cols();
        ids.push_back(p.id);
    }
    Tensor y(rows, cols);
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& P = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(P.row(r).begin(), P.row(r).end(), y.row(r).begin() + static_cast<std::ptrdiff_t>(off));
        off += P.cols();
    }
    return t.record(Op::ConcatCols, ids, std::move(y), [ids](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        std::size_t off = 0;
        for (int id : ids) {
            const std::size_t w = tp.value(id).cols();
            if (tp.requires_grad(id)) {
                Tensor& gi = tp.grad_buffer(id);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
            }
            off += w;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Tape& t = tape_of(parts.front());
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    std::vector<int> ids;
    for (Var p : parts) {
        tape_of(parts.front(), p);
        if (p.cols() != cols) shape_error("concat_rows", parts.front().value(), p.value());
        rows += p.rows();
        ids.push_back(p.id);
    }
    std::vector<double> vals;
    vals.reserve(rows * cols);
    for (Var p : parts) vals.insert(vals.end(), p.value().data().begin(), p.value().data().end());
    return t.record(Op::ConcatRows, ids, Tensor(rows, cols, std::move(vals)),
                    [ids](Tape& tp, int self) {
                        const Tensor& g = tp.grad_buffer(self);
                        std::size_t off = 0;
                        for (int id : ids) {
                            const std::size_t n = tp.value(id).size();
                            if (tp.requires_grad(id)) {
                                Tensor& gi = tp.grad_buffer(id);
                                for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                            }
                            off += n;
                        }
                    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (begin > end || end > A.rows())
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + "," +
                                    std::to_string(end) + ") outside " + A.shape_str());
    const std::size_t c = A.cols();
    std::vector<double> vals(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                             A.data().begin() + static_cast<std::ptrdiff_t>(end * c));
    const int ia = a.id;
    return t.record(Op::SliceRows, {ia}, Tensor(end - begin, c, std::move(vals)),
                    [ia, begin, c](Tape& tp, int self) {
                        const Tensor& g = tp.grad_buffer(self);
                        Tensor& ga = tp.grad_buffer(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
                    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (begin > end || end > A.cols())
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + "," +
                                    std::to_string(end) + ") outside " + A.shape_str());
    Tensor y(A.rows(), end - begin);
    for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = begin; c < end; ++c) y(r, c - begin) = A(r, c);
    const int ia = a.id;
    return t.record(Op::SliceCols, {ia}, std::move(y), [ia, begin](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
    });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    Tensor y(rows.size(), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= A.rows())
            throw std::invalid_argument("gather_rows: row " + std::to_string(rows[i]) +
                                        " outside " + A.shape_str());
        std::copy(A.row(rows[i]).begin(), A.row(rows[i]).end(), y.row(i).begin());
    }
    const int ia = a.id;
    return t.record(Op::GatherRows, {ia}, std::move(y), [ia, rows](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < g.cols(); ++c) ga(rows[i], c) += g(i, c);
    });
}

// ---- reductions & losses ---------------------------------------------------

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const int ia = a.id;
    return t.record(Op::Sum, {ia}, Tensor::scalar(s), [ia](Tape& tp, int self) {
        const double g = tp.grad_buffer(self)[0];
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(Var a) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (A.empty()) throw std::invalid_argument("mean: empty input");
    double s = 0.0;
    for (double v : A.data()) s += v;
    const double inv = 1.0 / static_cast<double>(A.size());
    const int ia = a.id;
    return t.record(Op::Mean, {ia}, Tensor::scalar(s * inv), [ia, inv](Tape& tp, int self) {
        const double g = tp.grad_buffer(self)[0] * inv;
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

double kl_div_rows(const Tensor& A, const Tensor& P) {
    if (!A.same_shape(P)) shape_error("kl_div_rows", A, P);
    if (A.rows() == 0) throw std::invalid_argument("kl_div_rows: empty input");
    check_stochastic_rows("kl_div_rows (attention)", A);
    check_stochastic_rows("kl_div_rows (target)", P);
    double total = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) {
        if (A[i] > 0.0) total += A[i] * std::log(A[i] / std::max(P[i], kKlTargetFloor));
    }
    return total / static_cast<double>(A.rows());
}

Var kl_div_rows(Var a, const Tensor& target) {
    Tape& t = tape_of(a);
    const double v = kl_div_rows(a.value(), target);
    const int ia = a.id;
    return t.record(Op::KlDivRows, {ia}, Tensor::scalar(v), [ia, target](Tape& tp, int self) {
        const Tensor& A = tp.value(ia);
        const double g = tp.grad_buffer(self)[0] / static_cast<double>(A.rows());
        Tensor& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < A.size(); ++i) {
            if (A[i] > 0.0)
                ga[i] += g * (std::log(A[i] / std::max(target[i], kKlTargetFloor)) + 1.0);
        }
    });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
    Tape& t = tape_of(logits);
    const Tensor& X = logits.value();
    if (!X.same_shape(targets)) shape_error("bce_with_logits", X, targets);
    double total = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double x = X[i];
        total += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    const int ix = logits.id;
    return t.record(Op::BceWithLogits, {ix}, Tensor::scalar(total),
                    [ix, targets](Tape& tp, int self) {
                        const Tensor& X = tp.value(ix);
                        const double g = tp.grad_buffer(self)[0];
                        Tensor& gx = tp.grad_buffer(ix);
                        for (std::size_t i = 0; i < X.size(); ++i)
                            gx[i] += g * (stable_sigmoid(X[i]) - targets[i]);
                    });
}

// ---- ParamStore ------------------------------------------------------------

std::size_t ParamStore::add(std::string name, Tensor value) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
        throw std::invalid_argument("parameter name must be non-empty without whitespace: '" +
                                    name + "'");
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Param p;
    p.name = std::move(name);
    p.grad = Tensor(value.rows(), value.cols());
    p.first_moment = Tensor(value.rows(), value.cols());
    p.second_moment = Tensor(value.rows(), value.cols());
    p.value = std::move(value);
    params_.push_back(std::move(p));
    return params_.size() - 1;
}

std::size_t ParamStore::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return i;
    throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
}

bool ParamStore::contains(std::string_view name) const {
    return std::any_of(params_.begin(), params_.end(),
                       [&](const Param& p) { return p.name == name; });
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

void ParamStore::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os << "CKPT v1 " << params_.size() << ' ' << step_ << '\n';
    for (const auto& p : params_)
        os << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    for (const auto& p : params_)
        for (double v : p.value.data()) io::write_le(os, v);
    if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

void ParamStore::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string line;
    std::getline(is, line);
    std::istringstream head(line);
    std::string magic, version;
    std::size_t count = 0;
    std::uint64_t step = 0;
    if (!(head >> magic >> version >> count >> step) || magic != "CKPT" || version != "v1")
        throw std::runtime_error("checkpoint " + path.string() + ": malformed header '" + line + "'");
    if (count != params_.size())
        throw std::runtime_error("checkpoint has " + std::to_string(count) +
                                 " parameters, model expects " + std::to_string(params_.size()));
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < count; ++i) {
        std::getline(is, line);
        std::istringstream ls(line);
        std::string name;
        std::size_t r = 0, c = 0;
        if (!(ls >> name >> r >> c))
            throw std::runtime_error("checkpoint: malformed entry '" + line + "'");
        const std::size_t idx = index_of(name);
        if (params_[idx].value.rows() != r || params_[idx].value.cols() != c)
            throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                                     std::to_string(r) + "x" + std::to_string(c) + ", expected " +
                                     params_[idx].value.shape_str());
        order.push_back(idx);
    }
    for (std::size_t idx : order)
        for (double& v : params_[idx].value.data()) v = io::read_le<double>(is);
    step_ = step;
}

// ---- optimizer -------------------------------------------------------------

void adamw_step(ParamStore& store, const AdamW& hp) {
    if (!(hp.lr > 0.0)) throw std::invalid_argument("adamw: lr must be positive");
    if (hp.beta1 < 0.0 || hp.beta1 >= 1.0 || hp.beta2 < 0.0 || hp.beta2 >= 1.0)
        throw std::invalid_argument("adamw: betas must lie in [0, 1)");
    if (hp.eps < 0.0 || hp.weight_decay < 0.0)
        throw std::invalid_argument("adamw: eps and weight decay must be non-negative");
    const auto t = static_cast<double>(store.step() + 1);
    const double bc1 = 1.0 - std::pow(hp.beta1, t);
    const double bc2 = 1.0 - std::pow(hp.beta2, t);
    for (auto& p : store) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            double& m = p.first_moment[i];
            double& v = p.second_moment[i];
            m = hp.beta1 * m + (1.0 - hp.beta1) * g;
            v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.value[i] -= hp.lr * hp.weight_decay * p.value[i];
            p.value[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
        }
    }
    store.advance_step();
}

// ---- gradient check --------------------------------------------------------

double finite_diff_check(const LossFn& fn, ParamStore& store, double eps) {
    store.zero_grad();
    {
        Tape tape;
        Var loss = fn(tape, store);
        tape.backward(loss);
        tape.accumulate_param_grads(store);
    }
    auto eval = [&]() {
        Tape tape;
        return fn(tape, store).value().item();
    };
    double worst = 0.0;
    for (auto& p : store) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + eps;
            const double fp = eval();
            p.value[i] = orig - eps;
            const double fm = eval();
            p.value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = p.grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace pfdetr::ad
