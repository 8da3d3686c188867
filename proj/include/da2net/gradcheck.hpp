#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "da2net/attention.hpp"
#include "da2net/tape.hpp"

namespace da2 {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckEps = 1e-5;

struct GradcheckEntry {
    std::string scope;  // e.g. "conv2d[groups=2]"
    std::string group;  // parameter or input name
    double max_rel_err = 0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    bool pass() const;
    std::vector<GradcheckEntry> offenders() const;
};

/// Differentiable leaves checked by central differences, held by pointer so
/// that parameters living inside a model can be perturbed in place.
using GradLeaves = std::vector<std::pair<std::string, Tensor64*>>;

/// Builds a scalar loss on `tape`; it must record each leaf through
/// tape.parameter(name, *leaf) under the same name.
using LossBuilder = std::function<Var(Tape<double>&)>;

/// Compares tape gradients against central differences for every leaf.
std::vector<GradcheckEntry> check_gradients(const std::string& scope, const GradLeaves& leaves,
                                            const LossBuilder& loss, double eps = kGradcheckEps);

/// One attention block on a random input of `input_shape`, train-mode BN,
/// loss = <block(z), w> for a fixed random w.
std::vector<GradcheckEntry> check_attention_block(const AttentionBlockConfig& cfg, const Shape& input_shape,
                                                  std::uint64_t seed);

/// Known scopes: conv2d, conv1d, gap, batch_norm, sigmoid, relu, add, scale,
/// linear, cross_entropy, da2net, full, all.
const std::vector<std::string>& gradcheck_scopes();

/// Throws ConfigError for an unknown scope.
GradcheckReport run_gradcheck(const std::string& scope, std::uint64_t seed);

std::string gradcheck_to_json(const GradcheckReport& report);

}  // namespace da2
