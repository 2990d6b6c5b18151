#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every primitive applied during one forward pass. Nodes are
// appended in execution order, so the record list is already topologically
// sorted and backward() is a single reverse sweep. Tapes are cheap to build
// and are discarded after each step.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pfdetr/targets.hpp"
#include "pfdetr/tensor.hpp"

namespace pfdetr::ad {

class Tape;
class ParamStore;

enum class Op : std::uint8_t {
    Leaf,
    Param,
    Constant,
    MatMul,
    MatMulNT,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    Scale,
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Gelu,
    Relu,
    Abs,
    Clamp,
    Minimum,
    Maximum,
    LayerNorm,
    SoftmaxRows,
    ConcatCols,
    ConcatRows,
    SliceRows,
    SliceCols,
    GatherRows,
    Sum,
    Mean,
    RowNormalize,
    KlDivRows,
    BceWithLogits,
};

std::string_view op_name(Op op);

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Var constant(Tensor value);
    Var leaf(Tensor value);
    /// Leaf bound to parameter `index` of `store`; its gradient flows back via
    /// accumulate_param_grads().
    Var param(const ParamStore& store, std::size_t index);
    Var param(const ParamStore& store, std::string_view name);

    /// Constant copy of `x`'s value. With a replay cache attached, the value
    /// is recorded on the first pass and replayed on later ones.
    Var stop_gradient(Var x);
    void set_replay(TargetCache* cache) { replay_ = cache; }
    TargetCache* replay() const { return replay_; }

    /// Appends a node. `backward` may be empty when no input needs a gradient.
    Var record(Op op, std::vector<int> inputs, Tensor value, BackwardFn backward);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(Var v) const { return value(v.id); }
    /// Gradient buffer of a node after backward(); empty tensor if none reached it.
    const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    Op op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
    const std::vector<int>& inputs(int id) const {
        return nodes_[static_cast<std::size_t>(id)].inputs;
    }
    std::size_t size() const { return nodes_.size(); }

    /// Zero-initialized gradient buffer for `id`, allocated on first use.
    Tensor& grad_buffer(int id);

    void backward(Var loss);
    /// Adds gradients of parameter leaves into the store's grad buffers.
    void accumulate_param_grads(ParamStore& store) const;

private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<int> inputs;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::ptrdiff_t param_index = -1;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    TargetCache* replay_ = nullptr;
};

// ---- primitives ------------------------------------------------------------

Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
/// m×n plus a 1×n row broadcast over every row.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var relu(Var a);
Var abs(Var a);
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
/// Row-wise layer normalization with affine 1×n gamma and beta.
Var layer_norm(Var x, Var gamma, Var beta);
/// Row softmax. An optional additive mask (same shape, 0 or -inf) removes entries.
Var softmax_rows(Var x, const Tensor* mask = nullptr);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
Var sum(Var a);
Var mean(Var a);
/// Divides each row by its sum. Rows summing to zero become uniform and pass no gradient.
Var row_normalize(Var a);

inline constexpr double kKlTargetFloor = 1e-12;
inline constexpr double kRowSumTolerance = 1e-6;

/// Mean over rows of Σ_k A_ik log(A_ik / max(P_ik, 1e-12)); 0·log 0 = 0. P is
/// a constant target.
Var kl_div_rows(Var a, const Tensor& target);
/// Σ of elementwise sigmoid binary cross-entropy between logits and constant targets.
Var bce_with_logits(Var logits, const Tensor& targets);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---- plain-tensor forward helpers -----------------------------------------

/// Row softmax of a plain tensor. Non-finite entries are rejected.
Tensor softmax_rows(const Tensor& x);
/// KL value only; same conventions and validation as the tape version.
double kl_div_rows(const Tensor& a, const Tensor& target);

// ---- parameters & optimizer -----------------------------------------------

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;
};

class ParamStore {
public:
    std::size_t add(std::string name, Tensor value);
    std::size_t index_of(std::string_view name) const;
    bool contains(std::string_view name) const;

    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    Param& at(std::string_view name) { return params_[index_of(name)]; }
    const Param& at(std::string_view name) const { return params_[index_of(name)]; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    std::uint64_t step() const { return step_; }
    void advance_step() { ++step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    void save(const std::filesystem::path& path) const;
    /// Loads values by name into an existing store with identical layout.
    void load(const std::filesystem::path& path);

private:
    std::vector<Param> params_;
    std::uint64_t step_ = 0;
};

struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// Decoupled-weight-decay Adam update of every parameter, then step + 1.
void adamw_step(ParamStore& store, const AdamW& hp);

/// Builds a scalar loss on a fresh tape from the current parameter values.
using LossFn = std::function<Var(Tape&, const ParamStore&)>;

/// Central-difference check of reverse-mode gradients for every parameter
/// coordinate. Returns the worst |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const LossFn& fn, ParamStore& store, double eps = 1e-5);

}  // namespace pfdetr::ad
