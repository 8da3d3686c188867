#include "da2net/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace da2 {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash) {
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001B3ull;
    }
    return hash;
}

std::string to_string(BlockKind kind) {
    switch (kind) {
        case BlockKind::Plain: return "plain";
        case BlockKind::Basic: return "basic";
        case BlockKind::Bottleneck: return "bottleneck";
    }
    return "?";
}

BlockKind parse_block_kind(const std::string& s) {
    if (s == "plain") return BlockKind::Plain;
    if (s == "basic" || s == "residual") return BlockKind::Basic;
    if (s == "bottleneck") return BlockKind::Bottleneck;
    throw ConfigError("unknown block kind '" + s + "' (expected plain, basic/residual or bottleneck)");
}

void validate_backbone_config(const BackboneConfig& cfg) {
    if (cfg.widths.empty()) throw ConfigError("backbone needs at least one stage");
    if (cfg.widths.size() != cfg.blocks.size()) {
        throw ConfigError("backbone widths (" + std::to_string(cfg.widths.size()) + " stages) and blocks (" +
                          std::to_string(cfg.blocks.size()) + " stages) differ in length");
    }
    for (int w : cfg.widths)
        if (w < 1) throw ConfigError("stage widths must be positive");
    for (int b : cfg.blocks)
        if (b < 1) throw ConfigError("blocks per stage must be positive");
    if (cfg.num_classes < 1) throw ConfigError("num_classes must be positive");
    if (cfg.in_channels < 1) throw ConfigError("in_channels must be positive");
    if (cfg.cardinality < 1 || cfg.base_width < 1) throw ConfigError("cardinality and base_width must be positive");
}

std::size_t NetworkSpec::attention_count() const {
    return static_cast<std::size_t>(
        std::count_if(units.begin(), units.end(), [](const UnitSpec& u) { return u.kind == UnitKind::Attention; }));
}

NetworkSpec describe_backbone(const BackboneConfig& cfg) {
    validate_backbone_config(cfg);
    NetworkSpec spec;
    spec.in_channels = cfg.in_channels;
    spec.num_classes = cfg.num_classes;

    UnitSpec stem;
    stem.kind = UnitKind::Stem;
    stem.name = "stem";
    stem.in_channels = cfg.in_channels;
    stem.out_channels = cfg.widths[0];
    spec.units.push_back(stem);

    std::int64_t current = cfg.widths[0];
    for (std::size_t s = 0; s < cfg.widths.size(); ++s) {
        for (int b = 0; b < cfg.blocks[s]; ++b) {
            UnitSpec u;
            u.kind = UnitKind::Block;
            u.block = cfg.block;
            u.name = "s" + std::to_string(s) + ".b" + std::to_string(b);
            u.stride = (s > 0 && b == 0) ? 2 : 1;
            u.in_channels = current;
            if (cfg.block == BlockKind::Bottleneck) {
                u.out_channels = std::int64_t{cfg.widths[s]} * 4;
                u.mid_channels = std::int64_t{cfg.widths[s]} * cfg.base_width / 64 * cfg.cardinality;
                u.cardinality = cfg.cardinality;
            } else {
                u.out_channels = cfg.widths[s];
            }
            current = u.out_channels;
            spec.units.push_back(u);
            if (b == 0) spec.insertion_points.push_back(u.name);
        }
    }

    UnitSpec head;
    head.kind = UnitKind::Head;
    head.name = "head";
    head.in_channels = current;
    head.out_channels = cfg.num_classes;
    spec.units.push_back(head);

    if (cfg.attention) spec = insert_attention(std::move(spec), *cfg.attention, cfg.insertion);
    return spec;
}

NetworkSpec insert_attention(NetworkSpec spec, const AttentionBlockConfig& acfg, const InsertionPolicy& policy) {
    std::vector<int> chosen;
    if (policy.all) {
        for (std::size_t i = 0; i < spec.insertion_points.size(); ++i) chosen.push_back(static_cast<int>(i));
    } else {
        chosen = policy.indices;
    }
    std::set<int> seen;
    for (int idx : chosen) {
        if (idx < 0 || idx >= static_cast<int>(spec.insertion_points.size())) {
            throw ConfigError("insertion index " + std::to_string(idx) + " out of range (network has " +
                              std::to_string(spec.insertion_points.size()) + " insertion points)");
        }
        if (!seen.insert(idx).second) throw ConfigError("insertion index " + std::to_string(idx) + " given twice");
        const std::string name = "attn" + std::to_string(idx);
        for (const auto& u : spec.units) {
            if (u.name == name) throw ConfigError("insertion point " + std::to_string(idx) + " already has attention");
        }
        auto it = std::find_if(spec.units.begin(), spec.units.end(),
                               [&](const UnitSpec& u) { return u.name == spec.insertion_points[idx]; });
        if (it == spec.units.end()) throw ConfigError("insertion point '" + spec.insertion_points[idx] + "' not found");
        UnitSpec a;
        a.kind = UnitKind::Attention;
        a.name = name;
        a.in_channels = a.out_channels = it->out_channels;
        a.attention = acfg;
        a.attention_index = idx;
        validate_block_config(acfg, a.in_channels);
        spec.units.insert(it + 1, a);
    }
    return spec;
}

NetworkSpec strip_attention(NetworkSpec spec) {
    std::erase_if(spec.units, [](const UnitSpec& u) { return u.kind == UnitKind::Attention; });
    return spec;
}

std::vector<Shape> propagate_shapes(const NetworkSpec& spec, const Shape& input) {
    if (input.size() != 4) throw ShapeError("network input must be (N,C,H,W), got " + shape_str(input));
    check_shape(input);
    if (input[1] != spec.in_channels) {
        throw ShapeError("network expects " + std::to_string(spec.in_channels) + " input channels, got " +
                         std::to_string(input[1]));
    }
    std::vector<Shape> shapes;
    Shape cur = input;
    for (const auto& u : spec.units) {
        if (cur.size() != 4 || cur[1] != u.in_channels) {
            throw ShapeError("unit '" + u.name + "' expects " + std::to_string(u.in_channels) + " channels, receives " +
                             shape_str(cur));
        }
        switch (u.kind) {
            case UnitKind::Stem:
                cur = {cur[0], u.out_channels, conv_out_extent(cur[2], 3, 1, 1), conv_out_extent(cur[3], 3, 1, 1)};
                break;
            case UnitKind::Block:
                cur = {cur[0], u.out_channels, conv_out_extent(cur[2], 3, u.stride, 1),
                       conv_out_extent(cur[3], 3, u.stride, 1)};
                break;
            case UnitKind::Attention: break;
            case UnitKind::Head: cur = {cur[0], u.out_channels}; break;
        }
        shapes.push_back(cur);
    }
    if (spec.units.empty() || spec.units.back().kind != UnitKind::Head) {
        throw ShapeError("network must end with a classifier head");
    }
    return shapes;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
BasicTensor<T> he_conv(std::int64_t out, std::int64_t in_per_group, std::int64_t k, Rng& rng) {
    return BasicTensor<T>::normal({out, in_per_group, k, k}, rng, 0.0,
                                  std::sqrt(2.0 / static_cast<double>(in_per_group * k * k)));
}

template <typename T>
struct ConvBn {
    BasicTensor<T> weight;
    BatchNormParams<T> bn;
    ConvGeometry geom;

    ConvBn() = default;
    ConvBn(std::int64_t in, std::int64_t out, int k, int stride, int groups, Rng& rng)
        : weight(he_conv<T>(out, in / groups, k, rng)), bn(BatchNormParams<T>::identity(out)),
          geom{groups, stride, (k - 1) / 2} {}

    Var forward(Tape<T>& tape, Var x, Mode mode, const std::string& pre, bool relu_after) {
        Var h = conv2d(tape, x, tape.parameter(pre + "conv.weight", weight), std::nullopt, geom);
        h = batch_norm(tape, h, tape.parameter(pre + "bn.gamma", bn.gamma), tape.parameter(pre + "bn.beta", bn.beta), bn,
                       mode);
        return relu_after ? relu(tape, h) : h;
    }
    void visit(const typename Unit<T>::Visitor& fn, const std::string& pre) {
        fn(pre + "conv.weight", weight);
        fn(pre + "bn.gamma", bn.gamma);
        fn(pre + "bn.beta", bn.beta);
    }
    void visit_buffers(const typename Unit<T>::Visitor& fn, const std::string& pre) {
        fn(pre + "bn.running_mean", bn.running_mean);
        fn(pre + "bn.running_var", bn.running_var);
    }
};

template <typename T>
class StemUnit final : public Unit<T> {
   public:
    StemUnit(const UnitSpec& s, Rng& rng) : Unit<T>(s), cb_(s.in_channels, s.out_channels, 3, 1, 1, rng) {}
    Var forward(Tape<T>& tape, Var x, Mode mode) override { return cb_.forward(tape, x, mode, pre(), true); }
    void visit_parameters(const typename Unit<T>::Visitor& fn) override { cb_.visit(fn, pre()); }
    void visit_buffers(const typename Unit<T>::Visitor& fn) override { cb_.visit_buffers(fn, pre()); }
    std::unique_ptr<Unit<T>> clone() const override { return std::make_unique<StemUnit>(*this); }

   private:
    std::string pre() const { return this->spec_.name + "."; }
    ConvBn<T> cb_;
};

template <typename T>
class BlockUnit final : public Unit<T> {
   public:
    BlockUnit(const UnitSpec& s, Rng& rng) : Unit<T>(s) {
        if (s.block == BlockKind::Bottleneck) {
            layers_.emplace_back(s.in_channels, s.mid_channels, 1, 1, 1, rng);
            layers_.emplace_back(s.mid_channels, s.mid_channels, 3, s.stride, s.cardinality, rng);
            layers_.emplace_back(s.mid_channels, s.out_channels, 1, 1, 1, rng);
        } else {
            layers_.emplace_back(s.in_channels, s.out_channels, 3, s.stride, 1, rng);
            layers_.emplace_back(s.out_channels, s.out_channels, 3, 1, 1, rng);
        }
        if (s.has_shortcut_conv()) shortcut_.emplace(s.in_channels, s.out_channels, 1, s.stride, 1, rng);
    }

    Var forward(Tape<T>& tape, Var x, Mode mode) override {
        Var h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const bool last = i + 1 == layers_.size();
            const bool residual = this->spec_.block != BlockKind::Plain;
            h = layers_[i].forward(tape, h, mode, layer_pre(i), !last || !residual);
        }
        if (this->spec_.block == BlockKind::Plain) return h;
        Var skip = shortcut_ ? shortcut_->forward(tape, x, mode, this->spec_.name + ".shortcut.", false) : x;
        return relu(tape, add(tape, h, skip));
    }
    void visit_parameters(const typename Unit<T>::Visitor& fn) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit(fn, layer_pre(i));
        if (shortcut_) shortcut_->visit(fn, this->spec_.name + ".shortcut.");
    }
    void visit_buffers(const typename Unit<T>::Visitor& fn) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit_buffers(fn, layer_pre(i));
        if (shortcut_) shortcut_->visit_buffers(fn, this->spec_.name + ".shortcut.");
    }
    std::unique_ptr<Unit<T>> clone() const override { return std::make_unique<BlockUnit>(*this); }

   private:
    std::string layer_pre(std::size_t i) const { return this->spec_.name + ".c" + std::to_string(i + 1) + "."; }
    std::vector<ConvBn<T>> layers_;
    std::optional<ConvBn<T>> shortcut_;
};

template <typename T>
class AttentionUnit final : public Unit<T> {
   public:
    AttentionUnit(const UnitSpec& s, Rng& rng)
        : Unit<T>(s), block_(AttentionBlock<T>::init(s.attention, s.in_channels, rng)) {}
    Var forward(Tape<T>& tape, Var x, Mode mode) override {
        return da2net_forward(tape, x, block_, mode, this->spec_.name + ".");
    }
    void visit_parameters(const typename Unit<T>::Visitor& fn) override {
        block_.visit_parameters([&](const std::string& n, BasicTensor<T>& t) { fn(this->spec_.name + "." + n, t); });
    }
    void visit_buffers(const typename Unit<T>::Visitor& fn) override {
        block_.visit_buffers([&](const std::string& n, BasicTensor<T>& t) { fn(this->spec_.name + "." + n, t); });
    }
    std::unique_ptr<Unit<T>> clone() const override { return std::make_unique<AttentionUnit>(*this); }

   private:
    AttentionBlock<T> block_;
};

template <typename T>
class HeadUnit final : public Unit<T> {
   public:
    HeadUnit(const UnitSpec& s, Rng& rng)
        : Unit<T>(s),
          weight_(BasicTensor<T>::normal({s.out_channels, s.in_channels}, rng, 0.0,
                                         std::sqrt(1.0 / static_cast<double>(s.in_channels)))),
          bias_({s.out_channels}) {}
    Var forward(Tape<T>& tape, Var x, Mode) override {
        Var pooled = global_avg_pool(tape, x);
        return linear(tape, pooled, tape.parameter(this->spec_.name + ".fc.weight", weight_),
                      tape.parameter(this->spec_.name + ".fc.bias", bias_));
    }
    void visit_parameters(const typename Unit<T>::Visitor& fn) override {
        fn(this->spec_.name + ".fc.weight", weight_);
        fn(this->spec_.name + ".fc.bias", bias_);
    }
    std::unique_ptr<Unit<T>> clone() const override { return std::make_unique<HeadUnit>(*this); }

   private:
    BasicTensor<T> weight_, bias_;
};

}  // namespace

template <typename T>
std::unique_ptr<Unit<T>> make_unit(const UnitSpec& spec, Rng& rng) {
    switch (spec.kind) {
        case UnitKind::Stem: return std::make_unique<StemUnit<T>>(spec, rng);
        case UnitKind::Block: return std::make_unique<BlockUnit<T>>(spec, rng);
        case UnitKind::Attention: return std::make_unique<AttentionUnit<T>>(spec, rng);
        case UnitKind::Head: return std::make_unique<HeadUnit<T>>(spec, rng);
    }
    throw ConfigError("unknown unit kind");
}

template <typename T>
Network<T> Network<T>::build(const NetworkSpec& spec, std::uint64_t seed, std::int64_t probe_extent) {
    propagate_shapes(spec, {1, spec.in_channels, probe_extent, probe_extent});
    Network<T> net;
    net.spec_ = spec;
    for (const auto& u : spec.units) {
        Rng rng(seed, fnv1a64(u.name));
        net.units_.push_back(make_unit<T>(u, rng));
    }
    return net;
}

template <typename T>
Network<T>::Network(const Network& other) : spec_(other.spec_), attention_enabled_(other.attention_enabled_) {
    for (const auto& u : other.units_) units_.push_back(u->clone());
}

template <typename T>
Network<T>& Network<T>::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

template <typename T>
void Network<T>::insert_attention(const AttentionBlockConfig& acfg, const InsertionPolicy& policy, std::uint64_t seed) {
    NetworkSpec next = da2::insert_attention(spec_, acfg, policy);
    std::vector<std::unique_ptr<Unit<T>>> units;
    std::size_t old = 0;
    for (const auto& u : next.units) {
        if (old < units_.size() && units_[old]->spec().name == u.name) {
            units.push_back(std::move(units_[old++]));
        } else {
            Rng rng(seed, fnv1a64(u.name));
            units.push_back(make_unit<T>(u, rng));
        }
    }
    spec_ = std::move(next);
    units_ = std::move(units);
}

template <typename T>
Var Network<T>::forward(Tape<T>& tape, Var input, Mode mode) {
    const auto& shape = tape.value(input).shape();
    if (shape.size() != 4 || shape[1] != spec_.in_channels) {
        throw ShapeError("network expects input (N," + std::to_string(spec_.in_channels) + ",H,W), got " +
                         shape_str(shape));
    }
    Var h = input;
    for (auto& u : units_) {
        if (u->spec().kind == UnitKind::Attention && !attention_enabled_) continue;
        h = u->forward(tape, h, mode);
    }
    return h;
}

template <typename T>
BasicTensor<T> Network<T>::predict(const BasicTensor<T>& batch) {
    Tape<T> tape(false);
    return tape.value(forward(tape, tape.constant(batch), Mode::Eval));
}

template <typename T>
void Network<T>::visit_parameters(const Visitor& fn) {
    for (auto& u : units_) u->visit_parameters(fn);
}

template <typename T>
void Network<T>::visit_buffers(const Visitor& fn) {
    for (auto& u : units_) u->visit_buffers(fn);
}

template <typename T>
std::int64_t Network<T>::parameter_count() {
    std::int64_t n = 0;
    visit_parameters([&](const std::string&, BasicTensor<T>& t) { n += static_cast<std::int64_t>(t.size()); });
    return n;
}

template <typename T>
std::vector<std::string> Network<T>::parameter_names() {
    std::vector<std::string> names;
    visit_parameters([&](const std::string& n, BasicTensor<T>&) { names.push_back(n); });
    return names;
}

template class Network<float>;
template class Network<double>;
template std::unique_ptr<Unit<float>> make_unit(const UnitSpec&, Rng&);
template std::unique_ptr<Unit<double>> make_unit(const UnitSpec&, Rng&);

}  // namespace da2
