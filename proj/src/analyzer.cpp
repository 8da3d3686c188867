#include "da2net/analyzer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace da2 {
namespace {

struct Planes {
    std::int64_t n, h, w;
};

class CostBuilder {
   public:
    CostBuilder(CostReport& r, bool with_macs) : r_(r), macs_(with_macs) {}

    // k x k conv, output map (c_out, h_out, w_out).
    void conv(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t groups,
              const Planes& out) {
        CostRow row{name + ".conv", k * k * (c_in / groups) * c_out, 0, 0};
        if (macs_) row.macs = out.n * k * k * (c_in / groups) * c_out * out.h * out.w;
        push(row);
    }
    void bn(const std::string& name, std::int64_t c, const Planes& p) {
        r_.running_buffers += 2 * c;
        push({name + ".bn", 2 * c, 0, macs_ ? p.n * c * p.h * p.w : 0});
    }
    void eltwise(const std::string& name, std::int64_t c, const Planes& p) {
        push({name, 0, 0, macs_ ? p.n * c * p.h * p.w : 0});
    }
    void conv1d(const std::string& name, std::int64_t alpha, std::int64_t c, std::int64_t n) {
        push({name, alpha, macs_ ? n * alpha * c : 0, 0});
    }
    void linear(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t n) {
        push({name, in * out + out, macs_ ? n * in * out : 0, 0});
    }

   private:
    void push(CostRow row) {
        r_.params += row.params;
        r_.macs += row.macs;
        r_.elementwise += row.elementwise;
        r_.rows.push_back(std::move(row));
    }
    CostReport& r_;
    bool macs_;
};

void attention_costs(CostBuilder& b, const UnitSpec& u, const Planes& p) {
    const auto C = u.in_channels;
    for (std::size_t j = 0; j < u.attention.layers.size(); ++j) {
        const auto& l = u.attention.layers[j];
        const std::string pre = u.name + ".l" + std::to_string(j);
        if (l.use_pointwise_reduction) {
            const auto r = reduced_channels(C);
            b.conv(pre + ".reduce", C, r, 1, 1, p);
            b.conv(pre + ".spatial", r, r, l.n, r, p);
            b.conv(pre + ".expand", r, C, 1, 1, p);
        } else {
            b.conv(pre, C, C, l.n, C / l.g, p);
        }
        b.bn(pre, C, p);
        b.eltwise(pre + ".sigmoid", C, p);
        if (u.attention.adaptive_selection) {
            b.eltwise(pre + ".gap", C, p);
            b.conv1d(pre + ".omega", l.alpha, C, p.n);
            b.eltwise(pre + ".gate_sigmoid", C, {p.n, 1, 1});
            b.eltwise(pre + ".scale", C, p);
        } else {
            // omega is still allocated, only unused.
            b.conv1d(pre + ".omega", l.alpha, C, 0);
        }
    }
}

CostReport analyze(const NetworkSpec& spec, const Shape& input, bool with_macs) {
    const auto shapes = propagate_shapes(spec, input);
    CostReport r;
    r.input = input;
    CostBuilder b(r, with_macs);
    Shape cur = input;
    for (std::size_t i = 0; i < spec.units.size(); ++i) {
        const auto& u = spec.units[i];
        const Shape& out = shapes[i];
        const Planes in_p{cur[0], cur[2], cur[3]};
        switch (u.kind) {
            case UnitKind::Stem: {
                const Planes p{out[0], out[2], out[3]};
                b.conv(u.name, u.in_channels, u.out_channels, 3, 1, p);
                b.bn(u.name, u.out_channels, p);
                b.eltwise(u.name + ".relu", u.out_channels, p);
                break;
            }
            case UnitKind::Block: {
                const Planes p{out[0], out[2], out[3]};
                if (u.block == BlockKind::Bottleneck) {
                    b.conv(u.name + ".c1", u.in_channels, u.mid_channels, 1, 1, in_p);
                    b.bn(u.name + ".c1", u.mid_channels, in_p);
                    b.eltwise(u.name + ".c1.relu", u.mid_channels, in_p);
                    b.conv(u.name + ".c2", u.mid_channels, u.mid_channels, 3, u.cardinality, p);
                    b.bn(u.name + ".c2", u.mid_channels, p);
                    b.eltwise(u.name + ".c2.relu", u.mid_channels, p);
                    b.conv(u.name + ".c3", u.mid_channels, u.out_channels, 1, 1, p);
                    b.bn(u.name + ".c3", u.out_channels, p);
                } else {
                    b.conv(u.name + ".c1", u.in_channels, u.out_channels, 3, 1, p);
                    b.bn(u.name + ".c1", u.out_channels, p);
                    b.eltwise(u.name + ".c1.relu", u.out_channels, p);
                    b.conv(u.name + ".c2", u.out_channels, u.out_channels, 3, 1, p);
                    b.bn(u.name + ".c2", u.out_channels, p);
                }
                if (u.block != BlockKind::Plain) {
                    if (u.has_shortcut_conv()) {
                        b.conv(u.name + ".shortcut", u.in_channels, u.out_channels, 1, 1, p);
                        b.bn(u.name + ".shortcut", u.out_channels, p);
                    }
                    b.eltwise(u.name + ".add", u.out_channels, p);
                }
                b.eltwise(u.name + ".relu", u.out_channels, p);
                break;
            }
            case UnitKind::Attention: attention_costs(b, u, in_p); break;
            case UnitKind::Head:
                b.eltwise(u.name + ".gap", u.in_channels, in_p);
                b.linear(u.name + ".fc", u.in_channels, u.out_channels, cur[0]);
                break;
        }
        cur = out;
    }
    return r;
}

}  // namespace

CostReport count_params(const NetworkSpec& spec) {
    return analyze(spec, {1, spec.in_channels, 32, 32}, false);
}

CostReport count_flops(const NetworkSpec& spec, const Shape& input) { return analyze(spec, input, true); }

CostDelta cost_delta(const CostReport& report, const CostReport& baseline) {
    return {report.params - baseline.params, report.macs - baseline.macs, report.elementwise - baseline.elementwise};
}

Rational reduced(std::int64_t num, std::int64_t den) {
    if (den == 0) throw ConfigError("rational with zero denominator");
    const auto g = std::gcd(num, den);
    return {num / g, den / g};
}

Rational grouped_conv_cost_ratio(int n, std::int64_t channels, int g, std::int64_t height, std::int64_t width) {
    if (g < 1 || channels % g != 0) throw ConfigError("grouping ratio must divide the channel count");
    CostReport grouped, standard;
    CostBuilder gb(grouped, true), sb(standard, true);
    gb.conv("grouped", channels, channels, n, channels / g, {1, height, width});
    sb.conv("standard", channels, channels, n, 1, {1, height, width});
    return reduced(grouped.macs, standard.macs);
}

std::string format_report_table(const CostReport& report, const CostReport* baseline) {
    std::ostringstream os;
    std::size_t width = 4;
    for (const auto& r : report.rows) width = std::max(width, r.name.size());
    os << std::left << std::setw(static_cast<int>(width)) << "name" << std::right << std::setw(14) << "params"
       << std::setw(16) << "macs" << std::setw(16) << "elementwise" << '\n';
    for (const auto& r : report.rows) {
        os << std::left << std::setw(static_cast<int>(width)) << r.name << std::right << std::setw(14) << r.params
           << std::setw(16) << r.macs << std::setw(16) << r.elementwise << '\n';
    }
    os << std::left << std::setw(static_cast<int>(width)) << "total" << std::right << std::setw(14) << report.params
       << std::setw(16) << report.macs << std::setw(16) << report.elementwise << '\n';
    os << std::fixed << std::setprecision(4) << "Params(M) " << report.mparams() << "  GFLOPs(MAC) " << report.gmacs()
       << "  running buffers " << report.running_buffers << '\n';
    if (baseline) {
        const auto d = cost_delta(report, *baseline);
        os << "baseline Params(M) " << baseline->mparams() << "  GFLOPs(MAC) " << baseline->gmacs() << '\n';
        os << "delta    Params(M) " << std::showpos << static_cast<double>(d.params) / 1e6 << "  GFLOPs(MAC) "
           << static_cast<double>(d.macs) / 1e9 << std::noshowpos << '\n';
    }
    return os.str();
}

std::string report_to_json(const CostReport& report, const CostReport* baseline) {
    using nlohmann::json;
    json rows = json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"name", r.name}, {"params", r.params}, {"macs", r.macs}, {"elementwise", r.elementwise}});
    }
    json j = {{"rows", rows},
              {"params", report.params},
              {"macs", report.macs},
              {"elementwise", report.elementwise},
              {"running_buffers", report.running_buffers},
              {"input", report.input}};
    if (baseline) {
        const auto d = cost_delta(report, *baseline);
        j["baseline"] = {{"params", baseline->params}, {"macs", baseline->macs}, {"elementwise", baseline->elementwise}};
        j["delta"] = {{"params", d.params}, {"macs", d.macs}, {"elementwise", d.elementwise}};
    }
    return j.dump(2);
}

ThroughputResult ThroughputResult::from_timings(std::int64_t batches, std::int64_t batch_size,
                                                std::vector<double> seconds) {
    ThroughputResult r;
    r.batches = batches;
    r.batch_size = batch_size;
    r.repeats = static_cast<int>(seconds.size());
    if (seconds.empty()) return r;
    double total = 0;
    for (double s : seconds) {
        total += s;
        r.per_repeat.push_back(static_cast<double>(batches * batch_size) / s);
    }
    r.seconds = total / static_cast<double>(seconds.size());
    r.throughput = static_cast<double>(batches * batch_size) / r.seconds;
    r.latency = r.seconds / static_cast<double>(batches);
    if (r.per_repeat.size() >= 2) {
        const double mean =
            std::accumulate(r.per_repeat.begin(), r.per_repeat.end(), 0.0) / static_cast<double>(r.per_repeat.size());
        double ss = 0;
        for (double t : r.per_repeat) ss += (t - mean) * (t - mean);
        r.spread = std::sqrt(ss / static_cast<double>(r.per_repeat.size() - 1));
    }
    return r;
}

ThroughputResult measure_throughput(Network<float>& net, const ThroughputOptions& opts) {
    if (opts.warmup < 1) throw ConfigError("throughput measurement needs at least one warmup batch");
    if (opts.batches < 1 || opts.batch_size < 1 || opts.repeats < 1) {
        throw ConfigError("batches, batch size and repeats must be positive");
    }
    Rng rng(opts.seed, 0xBE7C4);
    const Tensor batch =
        Tensor::normal({opts.batch_size, net.spec().in_channels, opts.height, opts.width}, rng, 0.0, 1.0);
    volatile float sink = 0;
    for (int i = 0; i < opts.warmup; ++i) sink = sink + net.predict(batch)[0];
    std::vector<double> seconds;
    for (int r = 0; r < opts.repeats; ++r) {
        const auto start = std::chrono::steady_clock::now();
        for (std::int64_t i = 0; i < opts.batches; ++i) sink = sink + net.predict(batch)[0];
        const auto stop = std::chrono::steady_clock::now();
        seconds.push_back(std::chrono::duration<double>(stop - start).count());
    }
    return ThroughputResult::from_timings(opts.batches, opts.batch_size, std::move(seconds));
}

std::string throughput_to_json(const ThroughputResult& r) {
    nlohmann::json j = {{"batches", r.batches},   {"batch_size", r.batch_size}, {"seconds", r.seconds},
                        {"throughput", r.throughput}, {"latency", r.latency},   {"repeats", r.repeats}};
    j["spread"] = r.spread ? nlohmann::json(*r.spread) : nlohmann::json(nullptr);
    return j.dump(2);
}

}  // namespace da2
