#pragma once

#include <functional>
#include <string>
#include <vector>

#include "da2net/ops.hpp"
#include "da2net/rng.hpp"
#include "da2net/tape.hpp"

namespace da2 {

/// One layer of the attention block: an n x n grouped conv with g channels per
/// group, BN and sigmoid (diverse extraction), followed by a channel gate from
/// GAP -> shared 1-D conv of length alpha -> sigmoid (adaptive selection).
struct AttentionLayerConfig {
    int n = 3;
    int g = 1;
    int alpha = 9;
    // Replaces the grouped conv by a 1x1 reduce (C -> C/16), depthwise n x n,
    // 1x1 expand (C/16 -> C). Only for the pointwise-reduction comparison.
    bool use_pointwise_reduction = false;

    bool operator==(const AttentionLayerConfig&) const = default;
};

struct AttentionBlockConfig {
    std::vector<AttentionLayerConfig> layers;
    bool enforce_ascending = true;
    bool adaptive_selection = true;

    /// 3 -> 5 -> 7, g = 1, alpha = 9.
    static AttentionBlockConfig defaults();
    /// Same g and alpha for every layer.
    static AttentionBlockConfig from_filters(const std::vector<int>& filters, int g = 1, int alpha = 9);

    bool operator==(const AttentionBlockConfig&) const = default;
};

inline constexpr int kPointwiseReduction = 16;

/// Channels inside the pointwise-reduction variant.
inline std::int64_t reduced_channels(std::int64_t channels) {
    return std::max<std::int64_t>(1, channels / kPointwiseReduction);
}

/// Throws ConfigError naming the violated constraint. Returns cfg unchanged.
const AttentionBlockConfig& validate_block_config(const AttentionBlockConfig& cfg, std::int64_t channels);

template <typename T>
struct AttentionLayerParams {
    Conv2dParams<T> diverse;  // channel preserving, groups = C/g
    BatchNormParams<T> bn;
    BasicTensor<T> omega;  // (alpha)
    // Pointwise-reduction variant only.
    BasicTensor<T> reduce, expand;
};

template <typename T>
struct AttentionBlock {
    AttentionBlockConfig config;
    std::int64_t channels = 0;
    std::vector<AttentionLayerParams<T>> layers;

    /// He fan-in normal for every conv weight and omega, BN gamma=1 beta=0.
    static AttentionBlock init(const AttentionBlockConfig& cfg, std::int64_t channels, Rng& rng);

    using Visitor = std::function<void(const std::string&, BasicTensor<T>&)>;
    void visit_parameters(const Visitor& fn);
    void visit_buffers(const Visitor& fn);

    std::int64_t parameter_count();
};

/// Closed-form learnable parameter count of a block on `channels`.
std::int64_t attention_block_param_count(const AttentionBlockConfig& cfg, std::int64_t channels);

// Recorded forms. `prefix` is prepended to parameter names on the tape.

template <typename T>
Var diverse_extract_layer(Tape<T>& tape, Var z, AttentionLayerParams<T>& p, Mode mode, const std::string& prefix);

template <typename T>
Var adaptive_select(Tape<T>& tape, Var z_d, AttentionLayerParams<T>& p, const std::string& prefix);

template <typename T>
Var da2net_forward(Tape<T>& tape, Var z, AttentionBlock<T>& block, Mode mode, const std::string& prefix = "");

// Plain tensor forms.

template <typename T>
BasicTensor<T> diverse_extract_layer(const BasicTensor<T>& z, AttentionLayerParams<T>& p, Mode mode);

/// Returns the (N,C) gate.
template <typename T>
BasicTensor<T> adaptive_select(const BasicTensor<T>& z_d, AttentionLayerParams<T>& p);

template <typename T>
BasicTensor<T> da2net_forward(const BasicTensor<T>& z, AttentionBlock<T>& block, Mode mode);

/// Gradients of sum(w * block(z)) for every block parameter and for z (key "input").
template <typename T>
ParamGrads<T> da2net_backward(const BasicTensor<T>& z, AttentionBlock<T>& block, Mode mode,
                              const BasicTensor<T>& upstream);

}  // namespace da2
