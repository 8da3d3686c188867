#include "da2net/attention.hpp"

#include <cmath>

namespace da2 {
namespace {

bool valid_grouping(int g) { return g == 1 || g == 2 || g == 4 || g == 8 || g == 16; }

template <typename T>
BasicTensor<T> he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
    return BasicTensor<T>::normal(std::move(shape), rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

std::string layer_prefix(const std::string& prefix, std::size_t j) { return prefix + "l" + std::to_string(j) + "."; }

}  // namespace

AttentionBlockConfig AttentionBlockConfig::defaults() { return from_filters({3, 5, 7}, 1, 9); }

AttentionBlockConfig AttentionBlockConfig::from_filters(const std::vector<int>& filters, int g, int alpha) {
    AttentionBlockConfig cfg;
    for (int n : filters) cfg.layers.push_back({n, g, alpha, false});
    return cfg;
}

const AttentionBlockConfig& validate_block_config(const AttentionBlockConfig& cfg, std::int64_t channels) {
    if (channels < 1) throw ConfigError("attention block needs a positive channel count");
    if (cfg.layers.empty()) throw ConfigError("attention block needs at least one layer (1≤ℓ≤4)");
    if (cfg.layers.size() > 4) {
        throw ConfigError("attention block has " + std::to_string(cfg.layers.size()) + " layers; at most 4 allowed (1≤ℓ≤4)");
    }
    for (std::size_t j = 0; j < cfg.layers.size(); ++j) {
        const auto& l = cfg.layers[j];
        const std::string where = "layer " + std::to_string(j) + ": ";
        if (l.n % 2 == 0 || l.n < 3 || l.n > 9) {
            throw ConfigError(where + "n must satisfy n=2x+1, 1≤x≤4 (got n=" + std::to_string(l.n) + ")");
        }
        if (l.alpha % 2 == 0 || l.alpha < 3 || l.alpha > 15) {
            throw ConfigError(where + "alpha must satisfy alpha=2y+1, 1≤y≤7 (got alpha=" + std::to_string(l.alpha) + ")");
        }
        if (!valid_grouping(l.g)) {
            throw ConfigError(where + "grouping ratio g must be one of 1,2,4,8,16 (got g=" + std::to_string(l.g) + ")");
        }
        if (channels % l.g != 0) {
            throw ConfigError(where + "grouping ratio g=" + std::to_string(l.g) + " must divide the channel count " +
                              std::to_string(channels));
        }
        if (cfg.enforce_ascending && j > 0 && l.n < cfg.layers[j - 1].n) {
            throw ConfigError("filter sizes must be non-decreasing (layer " + std::to_string(j - 1) + " has n=" +
                              std::to_string(cfg.layers[j - 1].n) + ", layer " + std::to_string(j) + " has n=" +
                              std::to_string(l.n) + ")");
        }
    }
    return cfg;
}

std::int64_t attention_block_param_count(const AttentionBlockConfig& cfg, std::int64_t channels) {
    std::int64_t total = 0;
    for (const auto& l : cfg.layers) {
        const std::int64_t n2 = static_cast<std::int64_t>(l.n) * l.n;
        if (l.use_pointwise_reduction) {
            const auto r = reduced_channels(channels);
            total += 2 * channels * r + n2 * r;
        } else {
            total += n2 * channels * l.g;
        }
        total += 2 * channels + l.alpha;
    }
    return total;
}

template <typename T>
AttentionBlock<T> AttentionBlock<T>::init(const AttentionBlockConfig& cfg, std::int64_t channels, Rng& rng) {
    validate_block_config(cfg, channels);
    AttentionBlock<T> b;
    b.config = cfg;
    b.channels = channels;
    for (const auto& l : cfg.layers) {
        AttentionLayerParams<T> p;
        const std::int64_t n = l.n;
        if (l.use_pointwise_reduction) {
            const auto r = reduced_channels(channels);
            p.reduce = he_normal<T>({r, channels, 1, 1}, channels, rng);
            p.diverse.weight = he_normal<T>({r, 1, n, n}, n * n, rng);
            p.diverse.geometry = {static_cast<int>(r), 1, static_cast<int>((n - 1) / 2)};
            p.expand = he_normal<T>({channels, r, 1, 1}, r, rng);
        } else {
            p.diverse.weight = he_normal<T>({channels, l.g, n, n}, l.g * n * n, rng);
            p.diverse.geometry = {static_cast<int>(channels / l.g), 1, static_cast<int>((n - 1) / 2)};
        }
        p.bn = BatchNormParams<T>::identity(channels);
        p.omega = he_normal<T>({l.alpha}, l.alpha, rng);
        b.layers.push_back(std::move(p));
    }
    return b;
}

template <typename T>
void AttentionBlock<T>::visit_parameters(const Visitor& fn) {
    for (std::size_t j = 0; j < layers.size(); ++j) {
        auto& p = layers[j];
        const auto pre = layer_prefix("", j);
        if (!p.reduce.empty()) fn(pre + "reduce.weight", p.reduce);
        fn(pre + "conv.weight", p.diverse.weight);
        if (!p.expand.empty()) fn(pre + "expand.weight", p.expand);
        fn(pre + "bn.gamma", p.bn.gamma);
        fn(pre + "bn.beta", p.bn.beta);
        fn(pre + "omega", p.omega);
    }
}

template <typename T>
void AttentionBlock<T>::visit_buffers(const Visitor& fn) {
    for (std::size_t j = 0; j < layers.size(); ++j) {
        const auto pre = layer_prefix("", j);
        fn(pre + "bn.running_mean", layers[j].bn.running_mean);
        fn(pre + "bn.running_var", layers[j].bn.running_var);
    }
}

template <typename T>
std::int64_t AttentionBlock<T>::parameter_count() {
    std::int64_t n = 0;
    visit_parameters([&](const std::string&, BasicTensor<T>& t) { n += static_cast<std::int64_t>(t.size()); });
    return n;
}

template <typename T>
Var diverse_extract_layer(Tape<T>& tape, Var z, AttentionLayerParams<T>& p, Mode mode, const std::string& prefix) {
    const auto& zv = tape.value(z);
    if (zv.rank() != 4) throw ShapeError("attention input must be (N,C,H,W), got " + shape_str(zv.shape()));
    const auto C = zv.dim(1);
    if (p.bn.gamma.size() != static_cast<std::size_t>(C)) {
        throw ShapeError("attention layer built for " + std::to_string(p.bn.gamma.size()) + " channels, input has " +
                         std::to_string(C));
    }
    Var h = z;
    if (!p.reduce.empty()) {
        h = conv2d(tape, h, tape.parameter(prefix + "reduce.weight", p.reduce), std::nullopt, ConvGeometry{});
    }
    h = conv2d(tape, h, tape.parameter(prefix + "conv.weight", p.diverse.weight), std::nullopt, p.diverse.geometry);
    if (!p.expand.empty()) {
        h = conv2d(tape, h, tape.parameter(prefix + "expand.weight", p.expand), std::nullopt, ConvGeometry{});
    }
    h = batch_norm(tape, h, tape.parameter(prefix + "bn.gamma", p.bn.gamma), tape.parameter(prefix + "bn.beta", p.bn.beta),
                   p.bn, mode);
    return sigmoid(tape, h);
}

template <typename T>
Var adaptive_select(Tape<T>& tape, Var z_d, AttentionLayerParams<T>& p, const std::string& prefix) {
    Var pooled = global_avg_pool(tape, z_d);
    Var mixed = conv1d_channel(tape, pooled, tape.parameter(prefix + "omega", p.omega));
    return sigmoid(tape, mixed);
}

template <typename T>
Var da2net_forward(Tape<T>& tape, Var z, AttentionBlock<T>& block, Mode mode, const std::string& prefix) {
    const auto in_shape = tape.value(z).shape();
    for (std::size_t j = 0; j < block.layers.size(); ++j) {
        const auto pre = layer_prefix(prefix, j);
        auto& p = block.layers[j];
        Var zd = diverse_extract_layer(tape, z, p, mode, pre);
        if (block.config.adaptive_selection) {
            Var gate = adaptive_select(tape, zd, p, pre);
            z = scale_broadcast(tape, zd, gate);
        } else {
            z = zd;
        }
    }
    if (tape.value(z).shape() != in_shape) throw ShapeError("attention block changed the feature map shape");
    return z;
}

template <typename T>
BasicTensor<T> diverse_extract_layer(const BasicTensor<T>& z, AttentionLayerParams<T>& p, Mode mode) {
    Tape<T> tape(false);
    return tape.value(diverse_extract_layer(tape, tape.constant(z), p, mode, ""));
}

template <typename T>
BasicTensor<T> adaptive_select(const BasicTensor<T>& z_d, AttentionLayerParams<T>& p) {
    Tape<T> tape(false);
    return tape.value(adaptive_select(tape, tape.constant(z_d), p, ""));
}

template <typename T>
BasicTensor<T> da2net_forward(const BasicTensor<T>& z, AttentionBlock<T>& block, Mode mode) {
    Tape<T> tape(false);
    return tape.value(da2net_forward(tape, tape.constant(z), block, mode));
}

template <typename T>
ParamGrads<T> da2net_backward(const BasicTensor<T>& z, AttentionBlock<T>& block, Mode mode,
                              const BasicTensor<T>& upstream) {
    Tape<T> tape;
    Var in = tape.input(z);
    Var out = da2net_forward(tape, in, block, mode);
    auto grads = tape.backward(dot_constant(tape, out, upstream));
    grads.emplace("input", tape.grad(in) ? *tape.grad(in) : BasicTensor<T>(z.shape()));
    return grads;
}

#define DA2_INSTANTIATE_ATTENTION(T)                                                                               \
    template struct AttentionBlock<T>;                                                                             \
    template Var diverse_extract_layer(Tape<T>&, Var, AttentionLayerParams<T>&, Mode, const std::string&);         \
    template Var adaptive_select(Tape<T>&, Var, AttentionLayerParams<T>&, const std::string&);                     \
    template Var da2net_forward(Tape<T>&, Var, AttentionBlock<T>&, Mode, const std::string&);                      \
    template BasicTensor<T> diverse_extract_layer(const BasicTensor<T>&, AttentionLayerParams<T>&, Mode);          \
    template BasicTensor<T> adaptive_select(const BasicTensor<T>&, AttentionLayerParams<T>&);                      \
    template BasicTensor<T> da2net_forward(const BasicTensor<T>&, AttentionBlock<T>&, Mode);                       \
    template ParamGrads<T> da2net_backward(const BasicTensor<T>&, AttentionBlock<T>&, Mode, const BasicTensor<T>&);

DA2_INSTANTIATE_ATTENTION(float)
DA2_INSTANTIATE_ATTENTION(double)

}  // namespace da2
