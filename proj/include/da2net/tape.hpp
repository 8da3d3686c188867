#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "da2net/ops.hpp"

namespace da2 {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

template <typename T>
using ParamGrads = std::map<std::string, BasicTensor<T>>;

/// Linear record of executed primitives for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep. A tape can be consumed by
/// backward() once; reset() clears it for reuse.
///
/// Parameters are recorded by reference: the referenced tensors must outlive
/// the tape and stay unmodified until backward() returns.
template <typename T>
class Tape {
   public:
    using TensorT = BasicTensor<T>;
    using Vjp = std::function<void(Tape&, const TensorT& grad_out)>;

    explicit Tape(bool record_grads = true) : record_(record_grads) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }

    /// Value that never receives a gradient.
    Var constant(TensorT value);
    /// Owned leaf that accumulates a gradient (for checks w.r.t. inputs).
    Var input(TensorT value);
    /// Named parameter leaf, held by reference.
    Var parameter(const std::string& name, const TensorT& value);

    /// Appends an op output; the new Var's id equals size() before the call.
    /// `vjp` must push gradients to `inputs` via accumulate().
    Var record(TensorT value, std::vector<Var> inputs, Vjp vjp);

    const TensorT& value(Var v) const;
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    /// Adds `g` into the gradient slot of `v` (no-op if v does not require grad).
    void accumulate(Var v, const TensorT& g);

    /// Gradient of the last backward() for `v`, or nullptr if it received none.
    const TensorT* grad(Var v) const;

    /// Runs the reverse sweep from scalar `loss` seeded with `seed`.
    /// Returns the summed gradient of every named parameter on the tape.
    ParamGrads<T> backward(Var loss, T seed = T(1));

    void reset();
    std::size_t size() const noexcept { return nodes_.size(); }

   private:
    struct Node {
        TensorT owned;
        const TensorT* ref = nullptr;
        std::string param_name;
        std::vector<Var> inputs;
        Vjp vjp;
        std::optional<TensorT> grad;
        bool requires_grad = false;
    };

    const Node& node(Var v) const;
    Var push(Node n);

    std::vector<Node> nodes_;
    bool record_;
    bool consumed_ = false;
};

// Test hook: when set, the VJP of the named op (e.g. "conv2d") returns a
// deliberately wrong gradient. Used by the gradient checker's negative control.
void set_corrupted_vjp(std::string op);
bool vjp_corrupted(std::string_view op);

// Recorded primitives.

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, ConvGeometry geom);

template <typename T>
Var conv1d_channel(Tape<T>& tape, Var d, Var kernel, std::optional<Var> bias = std::nullopt);

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x);

/// Running statistics in `stats` are updated in train mode; gamma and beta
/// come from the Vars.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormParams<T>& stats, Mode mode);

template <typename T>
Var sigmoid(Tape<T>& tape, Var x);

template <typename T>
Var relu(Tape<T>& tape, Var x);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

/// x (N,C,H,W) scaled per channel by w of shape (N,C), (N,C,1,1) or (1,C,1,1).
template <typename T>
Var scale_broadcast(Tape<T>& tape, Var x, Var w);

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias);

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape);

template <typename T>
Var sum(Tape<T>& tape, Var x);

/// Weighted sum <x, w> with a constant weight tensor; handy for gradient checks.
template <typename T>
Var dot_constant(Tape<T>& tape, Var x, const BasicTensor<T>& w);

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::vector<int> labels);

}  // namespace da2
