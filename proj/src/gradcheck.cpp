#include "da2net/gradcheck.hpp"

#include <algorithm>
#include <map>

#include "da2net/backbone.hpp"
#include "da2net/log.hpp"
#include "json.hpp"

namespace da2 {
namespace {

// Silences "alpha exceeds channels" style warnings for the tiny check tensors.
class QuietWarnings {
   public:
    QuietWarnings() : prev_(set_warning_sink([](const std::string&) {})) {}
    ~QuietWarnings() { set_warning_sink(prev_); }
    QuietWarnings(const QuietWarnings&) = delete;
    QuietWarnings& operator=(const QuietWarnings&) = delete;

   private:
    WarningSink prev_;
};

Tensor64 randn(const Shape& s, Rng& rng, double std = 1.0) { return Tensor64::normal(s, rng, 0.0, std); }

// Values kept away from the ReLU kink so central differences stay on one side.
Tensor64 away_from_zero(const Shape& s, Rng& rng) {
    Tensor64 t(s);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double mag = 0.1 + rng.uniform();
        t[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

struct Owned {
    std::map<std::string, Tensor64> tensors;
    GradLeaves leaves() {
        GradLeaves out;
        for (auto& [n, t] : tensors) out.emplace_back(n, &t);
        return out;
    }
};

using Entries = std::vector<GradcheckEntry>;

void append(Entries& out, Entries more) { out.insert(out.end(), more.begin(), more.end()); }

Entries weighted(const std::string& scope, Owned& o, const Shape& out_shape, Rng& rng,
                 const std::function<Var(Tape<double>&, std::map<std::string, Var>&)>& body) {
    const Tensor64 w = randn(out_shape, rng);
    return check_gradients(scope, o.leaves(), [&](Tape<double>& t) {
        std::map<std::string, Var> v;
        for (auto& [n, x] : o.tensors) v[n] = t.parameter(n, x);
        return dot_constant(t, body(t, v), w);
    });
}

Entries scope_conv2d(Rng& rng) {
    struct Case {
        std::int64_t n, c_in, c_out, h, w, k;
        int groups, stride, pad;
        bool bias;
    };
    const Case cases[] = {
        {2, 4, 6, 5, 5, 3, 1, 1, 1, true},  {2, 4, 4, 6, 5, 3, 2, 1, 1, false}, {2, 6, 6, 7, 7, 5, 6, 1, 2, false},
        {1, 4, 8, 7, 6, 3, 4, 2, 1, true},  {2, 3, 5, 4, 4, 1, 1, 1, 0, true},  {1, 8, 8, 7, 7, 9, 4, 1, 4, false},
    };
    Entries out;
    for (const auto& c : cases) {
        Owned o;
        o.tensors["x"] = randn({c.n, c.c_in, c.h, c.w}, rng);
        o.tensors["weight"] = randn({c.c_out, c.c_in / c.groups, c.k, c.k}, rng, 0.5);
        if (c.bias) o.tensors["bias"] = randn({c.c_out}, rng);
        const ConvGeometry g{c.groups, c.stride, c.pad};
        const auto ho = conv_out_extent(c.h, c.k, c.stride, c.pad), wo = conv_out_extent(c.w, c.k, c.stride, c.pad);
        const std::string scope = "conv2d[k=" + std::to_string(c.k) + ",groups=" + std::to_string(c.groups) +
                                  ",stride=" + std::to_string(c.stride) + "]";
        append(out, weighted(scope, o, {c.n, c.c_out, ho, wo}, rng, [&](Tape<double>& t, auto& v) {
                   std::optional<Var> b;
                   if (c.bias) b = v.at("bias");
                   return conv2d(t, v.at("x"), v.at("weight"), b, g);
               }));
    }
    return out;
}

Entries scope_conv1d(Rng& rng) {
    Entries out;
    for (const auto& [C, alpha, bias] : {std::tuple{8, 3, true}, std::tuple{8, 9, false}, std::tuple{5, 5, true}}) {
        Owned o;
        o.tensors["d"] = randn({2, C}, rng);
        o.tensors["kernel"] = randn({alpha}, rng);
        if (bias) o.tensors["bias"] = randn({1}, rng);
        const bool has_bias = bias;
        append(out, weighted("conv1d[alpha=" + std::to_string(alpha) + "]", o, {2, C}, rng,
                             [&](Tape<double>& t, auto& v) {
                                 std::optional<Var> b;
                                 if (has_bias) b = v.at("bias");
                                 return conv1d_channel(t, v.at("d"), v.at("kernel"), b);
                             }));
    }
    return out;
}

Entries scope_batch_norm(Rng& rng) {
    Entries out;
    for (const Mode mode : {Mode::Train, Mode::Eval}) {
        Owned o;
        o.tensors["x"] = randn({3, 4, 3, 2}, rng);
        o.tensors["gamma"] = randn({4}, rng);
        o.tensors["beta"] = randn({4}, rng);
        BatchNormParams<double> stats = BatchNormParams<double>::identity(4);
        for (std::size_t i = 0; i < 4; ++i) {
            stats.running_mean[i] = rng.normal(0, 0.5);
            stats.running_var[i] = 0.5 + rng.uniform();
        }
        append(out, weighted(mode == Mode::Train ? "batch_norm[train]" : "batch_norm[eval]", o, {3, 4, 3, 2}, rng,
                             [&](Tape<double>& t, auto& v) {
                                 BatchNormParams<double> s = stats;  // running stats must not drift between probes
                                 return batch_norm(t, v.at("x"), v.at("gamma"), v.at("beta"), s, mode);
                             }));
    }
    return out;
}

Entries scope_unary(const std::string& name, Rng& rng) {
    Owned o;
    o.tensors["x"] = name == "relu" ? away_from_zero({2, 3, 4, 4}, rng) : randn({2, 3, 4, 4}, rng, 2.0);
    return weighted(name, o, {2, 3, 4, 4}, rng, [&](Tape<double>& t, auto& v) {
        if (name == "relu") return relu(t, v.at("x"));
        return sigmoid(t, v.at("x"));
    });
}

Entries scope_gap(Rng& rng) {
    Owned o;
    o.tensors["x"] = randn({2, 3, 5, 4}, rng);
    return weighted("gap", o, {2, 3}, rng, [](Tape<double>& t, auto& v) { return global_avg_pool(t, v.at("x")); });
}

Entries scope_add(Rng& rng) {
    Owned o;
    o.tensors["a"] = randn({2, 3, 4, 4}, rng);
    o.tensors["b"] = randn({2, 3, 4, 4}, rng);
    return weighted("add", o, {2, 3, 4, 4}, rng, [](Tape<double>& t, auto& v) { return add(t, v.at("a"), v.at("b")); });
}

Entries scope_scale(Rng& rng) {
    Entries out;
    for (const Shape& ws : {Shape{2, 3}, Shape{2, 3, 1, 1}, Shape{1, 3, 1, 1}}) {
        Owned o;
        o.tensors["x"] = randn({2, 3, 4, 5}, rng);
        o.tensors["w"] = randn(ws, rng);
        append(out, weighted("scale[w=" + shape_str(ws) + "]", o, {2, 3, 4, 5}, rng,
                             [](Tape<double>& t, auto& v) { return scale_broadcast(t, v.at("x"), v.at("w")); }));
    }
    return out;
}

Entries scope_linear(Rng& rng) {
    Owned o;
    o.tensors["x"] = randn({3, 5}, rng);
    o.tensors["weight"] = randn({4, 5}, rng);
    o.tensors["bias"] = randn({4}, rng);
    return weighted("linear", o, {3, 4}, rng, [](Tape<double>& t, auto& v) {
        return linear(t, v.at("x"), v.at("weight"), v.at("bias"));
    });
}

Entries scope_cross_entropy(Rng& rng) {
    Owned o;
    o.tensors["logits"] = randn({4, 6}, rng, 2.0);
    const std::vector<int> labels{0, 5, 2, 2};
    return check_gradients("cross_entropy", o.leaves(), [&](Tape<double>& t) {
        return softmax_cross_entropy(t, t.parameter("logits", o.tensors["logits"]), labels);
    });
}

Entries scope_da2net(std::uint64_t seed) {
    Entries out;
    const std::vector<std::tuple<std::vector<int>, int, int>> configs = {
        {{3, 5, 7}, 1, 9}, {{3}, 2, 3}, {{5, 9}, 1, 3}, {{7, 7, 9}, 2, 9}, {{3, 5, 7, 9}, 1, 5},
    };
    std::uint64_t k = 0;
    for (const auto& [filters, g, alpha] : configs) {
        append(out, check_attention_block(AttentionBlockConfig::from_filters(filters, g, alpha), {2, 8, 7, 7},
                                          splitmix64(seed + ++k)));
    }
    // Gating off: the block reduces to the sigmoid-weighted extraction chain.
    AttentionBlockConfig plain = AttentionBlockConfig::defaults();
    plain.adaptive_selection = false;
    append(out, check_attention_block(plain, {2, 8, 6, 6}, splitmix64(seed + ++k)));
    return out;
}

Entries scope_full(std::uint64_t seed) {
    BackboneConfig b;
    b.widths = {4, 8};
    b.blocks = {1, 1};
    b.block = BlockKind::Basic;
    b.num_classes = 3;
    b.attention = AttentionBlockConfig::from_filters({3, 5}, 2, 3);
    auto net = Network<double>::build(describe_backbone(b), seed, 8);
    Rng rng(seed, 0xF011);
    Tensor64 x = randn({2, 3, 8, 8}, rng);
    GradLeaves leaves{{"input", &x}};
    net.visit_parameters([&](const std::string& n, Tensor64& t) { leaves.emplace_back(n, &t); });
    const std::vector<int> labels{1, 2};
    return check_gradients("full", leaves, [&](Tape<double>& t) {
        const Var logits = net.forward(t, t.parameter("input", x), Mode::Train);
        return softmax_cross_entropy(t, logits, labels);
    });
}

}  // namespace

bool GradcheckReport::pass() const {
    return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

std::vector<GradcheckEntry> GradcheckReport::offenders() const {
    std::vector<GradcheckEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [](const auto& e) { return !e.pass; });
    return out;
}

std::vector<GradcheckEntry> check_gradients(const std::string& scope, const GradLeaves& leaves,
                                            const LossBuilder& loss, double eps) {
    Tape<double> tape;
    const Var l = loss(tape);
    const ParamGrads<double> grads = tape.backward(l);

    std::vector<GradcheckEntry> out;
    for (const auto& [name, ptr] : leaves) {
        Tensor64* leaf = ptr;
        const auto it = grads.find(name);
        const Tensor64 analytic = it != grads.end() ? it->second : Tensor64(leaf->shape());
        const Tensor64 original = *leaf;
        const auto f = [&](const Tensor64& probe) {
            *leaf = probe;
            Tape<double> t(false);
            const double v = t.value(loss(t))[0];
            *leaf = original;
            return v;
        };
        const Tensor64 numeric = finite_difference_gradient(f, original, eps);
        const double err = max_relative_error(analytic, numeric);
        out.push_back({scope, name, err, err < kGradcheckTolerance});
    }
    return out;
}

std::vector<GradcheckEntry> check_attention_block(const AttentionBlockConfig& cfg, const Shape& input_shape,
                                                  std::uint64_t seed) {
    QuietWarnings quiet;
    validate_block_config(cfg, input_shape.at(1));
    Rng rng(seed, 0xB10C);
    AttentionBlock<double> block = AttentionBlock<double>::init(cfg, input_shape[1], rng);
    // Non-trivial BN affine parameters so their gradients are exercised away from the init point.
    for (auto& l : block.layers) {
        for (std::size_t i = 0; i < l.bn.gamma.size(); ++i) {
            l.bn.gamma[i] = 1.0 + 0.3 * rng.normal();
            l.bn.beta[i] = 0.3 * rng.normal();
        }
    }
    Tensor64 z = randn(input_shape, rng);
    const Tensor64 w = randn(input_shape, rng);
    GradLeaves leaves{{"input", &z}};
    block.visit_parameters([&](const std::string& n, Tensor64& t) { leaves.emplace_back(n, &t); });
    std::string scope = "da2net[";
    for (std::size_t j = 0; j < cfg.layers.size(); ++j) scope += (j ? "-" : "") + std::to_string(cfg.layers[j].n);
    scope += ",g=" + std::to_string(cfg.layers.front().g) + ",alpha=" + std::to_string(cfg.layers.front().alpha);
    if (!cfg.adaptive_selection) scope += ",no-gate";
    scope += "]";
    return check_gradients(scope, leaves, [&](Tape<double>& t) {
        // Running statistics drift between probes, but train-mode output never reads them.
        const Var zin = t.parameter("input", z);
        return dot_constant(t, da2net_forward(t, zin, block, Mode::Train), w);
    });
}

const std::vector<std::string>& gradcheck_scopes() {
    static const std::vector<std::string> scopes = {"conv2d", "conv1d", "gap",    "batch_norm",    "sigmoid",
                                                    "relu",   "add",    "scale",  "linear",        "cross_entropy",
                                                    "da2net", "full",   "all"};
    return scopes;
}

GradcheckReport run_gradcheck(const std::string& scope, std::uint64_t seed) {
    const auto& known = gradcheck_scopes();
    if (std::find(known.begin(), known.end(), scope) == known.end()) {
        std::string list;
        for (const auto& s : known) list += (list.empty() ? "" : ", ") + s;
        throw ConfigError("unknown gradcheck scope '" + scope + "' (expected one of " + list + ")");
    }
    QuietWarnings quiet;
    GradcheckReport r;
    const auto want = [&](const char* s) { return scope == "all" || scope == s; };
    Rng rng(seed, 0x6C4E);
    if (want("conv2d")) append(r.entries, scope_conv2d(rng));
    if (want("conv1d")) append(r.entries, scope_conv1d(rng));
    if (want("gap")) append(r.entries, scope_gap(rng));
    if (want("batch_norm")) append(r.entries, scope_batch_norm(rng));
    if (want("sigmoid")) append(r.entries, scope_unary("sigmoid", rng));
    if (want("relu")) append(r.entries, scope_unary("relu", rng));
    if (want("add")) append(r.entries, scope_add(rng));
    if (want("scale")) append(r.entries, scope_scale(rng));
    if (want("linear")) append(r.entries, scope_linear(rng));
    if (want("cross_entropy")) append(r.entries, scope_cross_entropy(rng));
    if (want("da2net")) append(r.entries, scope_da2net(seed));
    if (want("full")) append(r.entries, scope_full(seed));
    return r;
}

std::string gradcheck_to_json(const GradcheckReport& report) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& e : report.entries) {
        rows.push_back({{"scope", e.scope}, {"group", e.group}, {"max_rel_err", e.max_rel_err}, {"pass", e.pass}});
    }
    nlohmann::ordered_json j;
    j["tolerance"] = kGradcheckTolerance;
    j["pass"] = report.pass();
    j["entries"] = rows;
    return j.dump(2);
}

}  // namespace da2
