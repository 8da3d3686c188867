#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "da2net/attention.hpp"
#include "da2net/tape.hpp"

namespace da2 {

enum class BlockKind { Plain, Basic, Bottleneck };

std::string to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& s);

/// Where attention blocks go: every registered insertion point, or a subset.
struct InsertionPolicy {
    bool all = true;
    std::vector<int> indices;

    static InsertionPolicy all_bottlenecks() { return {}; }
    static InsertionPolicy at(std::vector<int> idx) { return {false, std::move(idx)}; }
};

struct BackboneConfig {
    std::vector<int> widths{16, 32, 64};  // stage planes (bottleneck output is 4x)
    std::vector<int> blocks{1, 1, 1};
    BlockKind block = BlockKind::Basic;
    int num_classes = 10;
    int in_channels = 3;
    int cardinality = 1;  // bottleneck 3x3 groups
    int base_width = 64;  // bottleneck width per group
    std::optional<AttentionBlockConfig> attention;
    InsertionPolicy insertion;
};

void validate_backbone_config(const BackboneConfig& cfg);

enum class UnitKind { Stem, Block, Attention, Head };

/// One structural unit of the network, enough to derive parameter shapes and
/// costs without instantiating tensors.
struct UnitSpec {
    UnitKind kind = UnitKind::Stem;
    std::string name;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    int stride = 1;
    BlockKind block = BlockKind::Basic;
    std::int64_t mid_channels = 0;  // bottleneck inner width
    int cardinality = 1;
    AttentionBlockConfig attention;  // Attention units
    int attention_index = -1;
    bool has_shortcut_conv() const { return kind == UnitKind::Block && block != BlockKind::Plain &&
                                            (stride != 1 || in_channels != out_channels); }
};

struct NetworkSpec {
    std::int64_t in_channels = 3;
    std::int64_t num_classes = 0;
    std::vector<UnitSpec> units;
    /// Names of the units after which an attention block may be placed, in order.
    std::vector<std::string> insertion_points;

    std::size_t attention_count() const;
};

NetworkSpec describe_backbone(const BackboneConfig& cfg);

/// Returns spec with attention units spliced after the chosen insertion points.
NetworkSpec insert_attention(NetworkSpec spec, const AttentionBlockConfig& acfg, const InsertionPolicy& policy);

NetworkSpec strip_attention(NetworkSpec spec);

/// Symbolic shape propagation; throws ShapeError on any inconsistency.
/// Returns the output shape of every unit, in order.
std::vector<Shape> propagate_shapes(const NetworkSpec& spec, const Shape& input);

template <typename T>
class Unit {
   public:
    using Visitor = std::function<void(const std::string&, BasicTensor<T>&)>;

    explicit Unit(UnitSpec spec) : spec_(std::move(spec)) {}
    virtual ~Unit() = default;

    const UnitSpec& spec() const { return spec_; }
    virtual Var forward(Tape<T>& tape, Var x, Mode mode) = 0;
    virtual void visit_parameters(const Visitor& fn) = 0;
    virtual void visit_buffers(const Visitor&) {}
    virtual std::unique_ptr<Unit> clone() const = 0;

   protected:
    UnitSpec spec_;
};

/// Instantiated network. Parameter names are "<unit>.<param>", unique.
///
/// Each unit is initialized from an rng stream keyed by its name, so adding
/// or removing attention units leaves every other unit's initial weights
/// untouched.
template <typename T>
class Network {
   public:
    using Visitor = typename Unit<T>::Visitor;

    static Network build(const NetworkSpec& spec, std::uint64_t seed, std::int64_t probe_extent = 32);

    Network() = default;
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const NetworkSpec& spec() const { return spec_; }

    /// Splices freshly initialized attention blocks at the chosen insertion points.
    void insert_attention(const AttentionBlockConfig& acfg, const InsertionPolicy& policy, std::uint64_t seed);

    /// When disabled, attention units are skipped in forward.
    void set_attention_enabled(bool enabled) { attention_enabled_ = enabled; }
    bool attention_enabled() const { return attention_enabled_; }

    Var forward(Tape<T>& tape, Var input, Mode mode);

    /// Eval-mode logits, no gradient recording.
    BasicTensor<T> predict(const BasicTensor<T>& batch);

    void visit_parameters(const Visitor& fn);
    void visit_buffers(const Visitor& fn);
    std::int64_t parameter_count();
    std::vector<std::string> parameter_names();

   private:
    NetworkSpec spec_;
    std::vector<std::unique_ptr<Unit<T>>> units_;
    bool attention_enabled_ = true;
};

template <typename T>
std::unique_ptr<Unit<T>> make_unit(const UnitSpec& spec, Rng& rng);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xCBF29CE484222325ull);

}  // namespace da2
