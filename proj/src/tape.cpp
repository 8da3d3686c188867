#include "da2net/tape.hpp"

#include <mutex>

namespace da2 {
namespace {

std::mutex corrupt_mutex;
std::string corrupted_op;

template <typename T>
void corrupt_if(std::string_view op, BasicTensor<T>& g) {
    if (!vjp_corrupted(op)) return;
    for (auto& v : g.data()) v = v * T(1.5) + T(0.01);
}

}  // namespace

void set_corrupted_vjp(std::string op) {
    std::lock_guard lock(corrupt_mutex);
    corrupted_op = std::move(op);
}

bool vjp_corrupted(std::string_view op) {
    std::lock_guard lock(corrupt_mutex);
    return !corrupted_op.empty() && corrupted_op == op;
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("tape: unknown variable " + std::to_string(v.id));
    return nodes_[v.id];
}

template <typename T>
Var Tape<T>::push(Node n) {
    if (consumed_) throw StateError("tape already consumed by backward(); call reset() before recording again");
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::constant(TensorT value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::input(TensorT value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = record_;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::parameter(const std::string& name, const TensorT& value) {
    Node n;
    n.ref = &value;
    n.param_name = name;
    n.requires_grad = record_;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::record(TensorT value, std::vector<Var> inputs, Vjp vjp) {
    Node n;
    n.owned = std::move(value);
    if (record_) {
        for (auto in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
        if (n.requires_grad) {
            n.inputs = std::move(inputs);
            n.vjp = std::move(vjp);
        }
    }
    return push(std::move(n));
}

template <typename T>
const BasicTensor<T>& Tape<T>::value(Var v) const {
    const Node& n = node(v);
    return n.ref ? *n.ref : n.owned;
}

template <typename T>
void Tape<T>::accumulate(Var v, const TensorT& g) {
    if (v.id >= nodes_.size()) throw StateError("tape: unknown variable " + std::to_string(v.id));
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    const auto& shape = (n.ref ? *n.ref : n.owned).shape();
    if (g.shape() != shape) {
        throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " + shape_str(shape));
    }
    if (!n.grad) {
        n.grad = g;
        return;
    }
    auto dst = n.grad->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
const BasicTensor<T>* Tape<T>::grad(Var v) const {
    const Node& n = node(v);
    return n.grad ? &*n.grad : nullptr;
}

template <typename T>
ParamGrads<T> Tape<T>::backward(Var loss, T seed) {
    if (consumed_) throw StateError("tape replayed twice without reset");
    if (!record_) throw StateError("tape was created without gradient recording");
    const Node& ln = node(loss);
    if ((ln.ref ? *ln.ref : ln.owned).size() != 1) throw ShapeError("backward() needs a scalar loss");
    consumed_ = true;
    for (auto& n : nodes_) n.grad.reset();
    accumulate(loss, TensorT((ln.ref ? *ln.ref : ln.owned).shape(), seed));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.grad || !n.vjp) continue;
        n.vjp(*this, *n.grad);
    }
    ParamGrads<T> out;
    for (const auto& n : nodes_) {
        if (n.param_name.empty()) continue;
        const TensorT zero(n.ref->shape());
        auto [it, inserted] = out.try_emplace(n.param_name, n.grad ? *n.grad : zero);
        if (!inserted && n.grad) {
            auto dst = it->second.data();
            auto src = n.grad->data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
    return out;
}

template <typename T>
void Tape<T>::reset() {
    nodes_.clear();
    consumed_ = false;
}

// ---------------------------------------------------------------------------

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, ConvGeometry geom) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(weight);
    auto y = conv2d_forward(xv, wv, bias ? &tape.value(*bias) : nullptr, geom);
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(y), std::move(inputs), [x, weight, bias, geom](Tape<T>& t, const BasicTensor<T>& g) {
        auto grads = conv2d_backward(t.value(x), t.value(weight), bias.has_value(), geom, g, t.requires_grad(x));
        corrupt_if("conv2d", grads.dweight);
        if (t.requires_grad(x)) {
            corrupt_if("conv2d", grads.dx);
            t.accumulate(x, grads.dx);
        }
        t.accumulate(weight, grads.dweight);
        if (bias) t.accumulate(*bias, grads.dbias);
    });
}

template <typename T>
Var conv1d_channel(Tape<T>& tape, Var d, Var kernel, std::optional<Var> bias) {
    const T b = bias ? tape.value(*bias)[0] : T(0);
    auto y = conv1d_channel(tape.value(d), tape.value(kernel), b);
    std::vector<Var> inputs{d, kernel};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(y), std::move(inputs), [d, kernel, bias](Tape<T>& t, const BasicTensor<T>& g) {
        auto grads = conv1d_channel_backward(t.value(d), t.value(kernel), g);
        corrupt_if("conv1d", grads.dkernel);
        corrupt_if("conv1d", grads.dd);
        t.accumulate(d, grads.dd);
        t.accumulate(kernel, grads.dkernel);
        if (bias) t.accumulate(*bias, BasicTensor<T>({1}, std::vector<T>{grads.dbias}));
    });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
    auto y = global_avg_pool(tape.value(x));
    return tape.record(std::move(y), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        auto dx = global_avg_pool_backward(t.value(x).shape(), g);
        corrupt_if("gap", dx);
        t.accumulate(x, dx);
    });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormParams<T>& stats, Mode mode) {
    // The kernel reads gamma/beta from a params struct; assemble a view that
    // shares running statistics with `stats`.
    BatchNormParams<T> p;
    p.gamma = tape.value(gamma);
    p.beta = tape.value(beta);
    p.running_mean = std::move(stats.running_mean);
    p.running_var = std::move(stats.running_var);
    p.momentum = stats.momentum;
    p.epsilon = stats.epsilon;
    BatchNormCache<T> cache;
    BasicTensor<T> y;
    try {
        y = batch_norm(tape.value(x), p, mode, tape.recording() ? &cache : nullptr);
    } catch (...) {
        stats.running_mean = std::move(p.running_mean);
        stats.running_var = std::move(p.running_var);
        throw;
    }
    stats.running_mean = std::move(p.running_mean);
    stats.running_var = std::move(p.running_var);
    return tape.record(std::move(y), {x, gamma, beta},
                       [x, gamma, beta, cache = std::move(cache)](Tape<T>& t, const BasicTensor<T>& g) {
                           auto grads = batch_norm_backward(t.value(gamma), cache, g);
                           corrupt_if("batch_norm", grads.dx);
                           corrupt_if("batch_norm", grads.dgamma);
                           t.accumulate(x, grads.dx);
                           t.accumulate(gamma, grads.dgamma);
                           t.accumulate(beta, grads.dbeta);
                       });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
    auto y = sigmoid(tape.value(x));
    const Var self{tape.size()};
    return tape.record(std::move(y), {x}, [x, self](Tape<T>& t, const BasicTensor<T>& g) {
        auto dx = sigmoid_backward(t.value(self), g);
        corrupt_if("sigmoid", dx);
        t.accumulate(x, dx);
    });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    auto y = relu(tape.value(x));
    return tape.record(std::move(y), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        auto dx = relu_backward(t.value(x), g);
        corrupt_if("relu", dx);
        t.accumulate(x, dx);
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (av.shape() != bv.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    BasicTensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
    return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

template <typename T>
Var scale_broadcast(Tape<T>& tape, Var x, Var w) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(w);
    const Shape w4 = wv.rank() == 2 ? Shape{wv.dim(0), wv.dim(1), 1, 1} : wv.shape();
    auto y = scale_broadcast(xv, wv.rank() == 2 ? wv.reshaped(w4) : wv);
    return tape.record(std::move(y), {x, w}, [x, w, w4](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xv = t.value(x);
        const auto& wv = t.value(w);
        const auto N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
        const bool per_sample = w4[0] == N;
        if (t.requires_grad(x)) {
            auto dx = scale_broadcast(g, wv.reshaped(w4));
            corrupt_if("scale", dx);
            t.accumulate(x, dx);
        }
        if (t.requires_grad(w)) {
            BasicTensor<T> dw(wv.shape());
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* gp = g.ptr() + (n * C + c) * HW;
                    const T* xp = xv.ptr() + (n * C + c) * HW;
                    T acc = 0;
                    for (std::int64_t i = 0; i < HW; ++i) acc += gp[i] * xp[i];
                    dw[static_cast<std::size_t>((per_sample ? n : 0) * C + c)] += acc;
                }
            }
            corrupt_if("scale", dw);
            t.accumulate(w, dw);
        }
    });
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias) {
    auto y = linear(tape.value(x), tape.value(weight), bias ? &tape.value(*bias) : nullptr);
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(y), std::move(inputs), [x, weight, bias](Tape<T>& t, const BasicTensor<T>& g) {
        auto grads = linear_backward(t.value(x), t.value(weight), g);
        corrupt_if("linear", grads.dweight);
        t.accumulate(x, grads.dx);
        t.accumulate(weight, grads.dweight);
        if (bias) t.accumulate(*bias, grads.dbias);
    });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    auto y = tape.value(x).reshaped(std::move(shape));
    return tape.record(std::move(y), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(x, g.reshaped(t.value(x).shape()));
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    T acc = 0;
    for (auto v : tape.value(x).data()) acc += v;
    return tape.record(BasicTensor<T>({1}, std::vector<T>{acc}), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(x, BasicTensor<T>(t.value(x).shape(), g[0]));
    });
}

template <typename T>
Var dot_constant(Tape<T>& tape, Var x, const BasicTensor<T>& w) {
    const auto& xv = tape.value(x);
    if (xv.shape() != w.shape()) throw ShapeError("dot_constant: shape mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += xv[i] * w[i];
    return tape.record(BasicTensor<T>({1}, std::vector<T>{acc}), {x}, [x, w](Tape<T>& t, const BasicTensor<T>& g) {
        BasicTensor<T> dx(w.shape());
        for (std::size_t i = 0; i < w.size(); ++i) dx[i] = g[0] * w[i];
        t.accumulate(x, dx);
    });
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::vector<int> labels) {
    auto res = softmax_cross_entropy(tape.value(logits), std::span<const int>(labels));
    return tape.record(BasicTensor<T>({1}, std::vector<T>{static_cast<T>(res.loss)}), {logits},
                       [logits, grad = std::move(res.grad)](Tape<T>& t, const BasicTensor<T>& g) {
                           BasicTensor<T> dl = grad;
                           for (auto& v : dl.data()) v *= g[0];
                           corrupt_if("cross_entropy", dl);
                           t.accumulate(logits, dl);
                       });
}

#define DA2_INSTANTIATE_TAPE(T)                                                                         \
    template class Tape<T>;                                                                             \
    template Var conv2d(Tape<T>&, Var, Var, std::optional<Var>, ConvGeometry);                          \
    template Var conv1d_channel(Tape<T>&, Var, Var, std::optional<Var>);                                \
    template Var global_avg_pool(Tape<T>&, Var);                                                        \
    template Var batch_norm(Tape<T>&, Var, Var, Var, BatchNormParams<T>&, Mode);                        \
    template Var sigmoid(Tape<T>&, Var);                                                                \
    template Var relu(Tape<T>&, Var);                                                                   \
    template Var add(Tape<T>&, Var, Var);                                                               \
    template Var scale_broadcast(Tape<T>&, Var, Var);                                                   \
    template Var linear(Tape<T>&, Var, Var, std::optional<Var>);                                        \
    template Var reshape(Tape<T>&, Var, Shape);                                                         \
    template Var sum(Tape<T>&, Var);                                                                    \
    template Var dot_constant(Tape<T>&, Var, const BasicTensor<T>&);                                    \
    template Var softmax_cross_entropy(Tape<T>&, Var, std::vector<int>);

DA2_INSTANTIATE_TAPE(float)
DA2_INSTANTIATE_TAPE(double)

}  // namespace da2
