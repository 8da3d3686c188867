#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "da2net/backbone.hpp"

namespace da2 {

struct CostRow {
    std::string name;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::int64_t elementwise = 0;
};

/// Parameter and multiply-accumulate accounting. "GFLOPs" in reports means
/// giga-MACs; elementwise ops (BN, activations, pooling, add, gating) are
/// tallied separately and are not part of the headline.
struct CostReport {
    std::vector<CostRow> rows;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::int64_t elementwise = 0;
    std::int64_t running_buffers = 0;  // BN running mean/var, not learnable
    Shape input;

    double mparams() const { return static_cast<double>(params) / 1e6; }
    double gmacs() const { return static_cast<double>(macs) / 1e9; }
};

/// Learnable parameters only (MAC fields zero).
CostReport count_params(const NetworkSpec& spec);

/// Parameters and MACs for a concrete (N,C,H,W) input.
CostReport count_flops(const NetworkSpec& spec, const Shape& input);

struct CostDelta {
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::int64_t elementwise = 0;
};

CostDelta cost_delta(const CostReport& report, const CostReport& baseline);

struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;
    bool operator==(const Rational&) const = default;
};

Rational reduced(std::int64_t num, std::int64_t den);

/// MACs of one grouped n x n conv with g channels per group over a standard
/// conv at equal n, C, H, W, as an exact fraction. Equals g/C.
Rational grouped_conv_cost_ratio(int n, std::int64_t channels, int g, std::int64_t height, std::int64_t width);

std::string format_report_table(const CostReport& report, const CostReport* baseline = nullptr);
std::string report_to_json(const CostReport& report, const CostReport* baseline = nullptr);

struct ThroughputResult {
    std::int64_t batches = 0;     // N
    std::int64_t batch_size = 0;  // b
    double seconds = 0;           // mean elapsed t over repeats
    double throughput = 0;        // N * b / t
    double latency = 0;           // t / N
    int repeats = 0;
    std::optional<double> spread;  // sample std-dev of per-repeat throughput; none if repeats < 2
    std::vector<double> per_repeat;

    static ThroughputResult from_timings(std::int64_t batches, std::int64_t batch_size, std::vector<double> seconds);
};

struct ThroughputOptions {
    std::int64_t batch_size = 32;
    std::int64_t batches = 10;
    int warmup = 2;
    int repeats = 100;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::uint64_t seed = 0;
};

/// Warmup batches untimed, then `repeats` timed runs of `batches` eval-mode
/// batches on a steady clock.
ThroughputResult measure_throughput(Network<float>& net, const ThroughputOptions& opts);

std::string throughput_to_json(const ThroughputResult& r);

}  // namespace da2
