// Command-line front end. Everything goes through the C interface in
// libda2net; this file only parses arguments and maps statuses to exit codes.
#include <cstdint>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "da2net/c_api.h"

namespace {

// 0 ok, 1 check failure, 2 usage/config, 3 numeric failure.
int exit_code(da2_status s) {
    switch (s) {
        case DA2_OK: return 0;
        case DA2_ERR_CHECK: return 1;
        case DA2_ERR_NUMERIC: return 3;
        case DA2_ERR_CONFIG:
        case DA2_ERR_IO:
        case DA2_ERR_SHAPE:
        case DA2_ERR_FORMAT:
        case DA2_ERR_ARGUMENT: return 2;
        default: return 1;
    }
}

struct OwnedString {
    char* p = nullptr;
    ~OwnedString() { da2_string_free(p); }
};

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
    std::vector<const char*> out;
    for (const auto& s : v) out.push_back(s.c_str());
    return out;
}

int finish(da2_status s, const OwnedString& out, bool print_on_failure = false) {
    if (out.p && (s == DA2_OK || print_on_failure)) std::cout << out.p << '\n';
    if (s != DA2_OK) std::cerr << "error: " << da2_status_name(s) << ": " << da2_last_error() << '\n';
    return exit_code(s);
}

std::string join_ints(const std::vector<int>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-size depthwise attention networks: training, cost analysis and verification"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(da2_version()));

    // train
    auto* train = app.add_subcommand("train", "Train a network described by a config file");
    std::string train_config;
    std::vector<std::string> train_sets;
    train->add_option("--config", train_config, "Config file")->required();
    train->add_option("--set", train_sets, "Override, e.g. train.epochs=5 (repeatable)");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Parameter and MAC accounting");
    std::string arch = "micro", input = "32x32", baseline;
    std::vector<std::string> analyze_sets;
    std::string attention_filters;
    int g = 1, alpha = 9;
    bool as_json = false;
    analyze->add_option("--arch", arch, "Config file or preset (micro, resnet50_cifar, resnet101_cifar, "
                                        "resnext50_cifar, wrn50_cifar)");
    analyze->add_option("--input", input, "Input extent HxW or NxCxHxW")->capture_default_str();
    analyze->add_option("--baseline", baseline, "Baseline architecture to report deltas against");
    analyze->add_option("--attention", attention_filters,
                        "Insert attention with these filter sizes, e.g. 3,5,7; deltas are then reported "
                        "against the same network without attention");
    analyze->add_option("--g", g, "Grouping ratio for --attention")->capture_default_str();
    analyze->add_option("--alpha", alpha, "Channel neighborhood for --attention")->capture_default_str();
    analyze->add_option("--set", analyze_sets, "Override, e.g. attention.g=2 (repeatable)");
    analyze->add_flag("--json", as_json, "Emit JSON");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification (f64)");
    std::string scope = "all", corrupt;
    std::uint64_t seed = 0;
    gradcheck->add_option("--scope", scope, "Op name, da2net, full or all")->capture_default_str();
    gradcheck->add_option("--seed", seed, "Random seed")->capture_default_str();
    gradcheck->add_option("--corrupt", corrupt, "Negative control: break this op's gradient")->group("");

    // bench
    auto* bench = app.add_subcommand("bench", "Eval-mode throughput");
    std::string bench_arch = "micro";
    std::vector<std::string> bench_sets;
    std::int64_t batch = 32, batches = 10;
    int repeats = 100, warmup = 2;
    bool compare = false;
    bench->add_option("--arch", bench_arch, "Config file or preset")->capture_default_str();
    bench->add_option("--batch", batch, "Batch size b")->capture_default_str();
    bench->add_option("--batches", batches, "Timed batches N per repeat")->capture_default_str();
    bench->add_option("--repeats", repeats, "Repeats averaged")->capture_default_str();
    bench->add_option("--warmup", warmup, "Untimed warmup batches")->capture_default_str();
    bench->add_option("--set", bench_sets, "Override (repeatable)");
    bench->add_flag("--compare", compare, "Time with attention disabled and enabled");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    OwnedString out;
    if (*train) {
        const auto sets = c_strings(train_sets);
        const auto s = da2_train(train_config.c_str(), sets.data(), sets.size(), &out.p);
        return finish(s, out);
    }
    if (*analyze) {
        std::vector<std::string> sets = analyze_sets;
        const bool with_attention = !attention_filters.empty();
        if (with_attention) {
            std::vector<int> filters;
            try {
                for (const auto& f : CLI::detail::split(attention_filters, ',')) filters.push_back(std::stoi(f));
            } catch (const std::exception&) {
                std::cerr << "error: --attention expects comma-separated integers, got '" << attention_filters << "'\n";
                return 2;
            }
            sets.insert(sets.begin(), {"attention.enabled=true", "attention.filters=" + join_ints(filters),
                                       "attention.g=" + std::to_string(g), "attention.alpha=" + std::to_string(alpha)});
        }
        const auto cs = c_strings(sets);
        const auto s = da2_analyze(arch.c_str(), cs.data(), cs.size(), input.c_str(),
                                   baseline.empty() ? nullptr : baseline.c_str(), with_attention ? 1 : 0,
                                   as_json ? 1 : 0, &out.p);
        return finish(s, out);
    }
    if (*gradcheck) {
        const auto s = da2_gradcheck(scope.c_str(), seed, corrupt.empty() ? nullptr : corrupt.c_str(), &out.p);
        return finish(s, out, true);
    }
    const auto cs = c_strings(bench_sets);
    const auto s = da2_bench(bench_arch.c_str(), cs.data(), cs.size(), batch, batches, repeats, warmup, compare ? 1 : 0,
                             &out.p);
    return finish(s, out);
}
