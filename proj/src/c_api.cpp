#include "da2net/c_api.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <string>

#include "da2net/analyzer.hpp"
#include "da2net/checkpoint.hpp"
#include "da2net/config.hpp"
#include "da2net/gradcheck.hpp"
#include "da2net/trainer.hpp"
#include "json.hpp"

struct da2_network {
    da2::Network<float> net;
};

namespace {

thread_local std::string g_last_error;

da2_status fail(da2_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

da2_status status_for(da2::ErrorKind k) {
    switch (k) {
        case da2::ErrorKind::Shape: return DA2_ERR_SHAPE;
        case da2::ErrorKind::Config: return DA2_ERR_CONFIG;
        case da2::ErrorKind::Format: return DA2_ERR_FORMAT;
        case da2::ErrorKind::Io: return DA2_ERR_IO;
        case da2::ErrorKind::Numeric: return DA2_ERR_NUMERIC;
        case da2::ErrorKind::Oracle: return DA2_ERR_NUMERIC;
        case da2::ErrorKind::State: return DA2_ERR_STATE;
    }
    return DA2_ERR_INTERNAL;
}

template <typename F>
da2_status guarded(F&& body) {
    g_last_error.clear();
    try {
        return body();
    } catch (const da2::Error& e) {
        return fail(status_for(e.kind()), e.what());
    } catch (const std::bad_alloc&) {
        return fail(DA2_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(DA2_ERR_INTERNAL, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

da2::ConfigDoc with_overrides(da2::ConfigDoc doc, const char* const* overrides, size_t n) {
    if (n > 0 && !overrides) throw da2::ConfigError("overrides pointer is null");
    for (size_t i = 0; i < n; ++i) {
        if (!overrides[i]) throw da2::ConfigError("override " + std::to_string(i) + " is null");
        doc.apply_override(overrides[i]);
    }
    return doc;
}

std::uint64_t model_seed(const da2::ConfigDoc& doc) {
    const auto s = doc.get_int("train", "seed", 0);
    if (s < 0) throw da2::ConfigError("train.seed must be >= 0");
    return static_cast<std::uint64_t>(s);
}

da2_status make_network(const da2::ConfigDoc& doc, da2_network** out) {
    const auto spec = da2::describe_backbone(da2::resolve_backbone(doc));
    auto* handle = new da2_network{da2::Network<float>::build(spec, model_seed(doc))};
    *out = handle;
    return DA2_OK;
}

std::string format_double_list(const std::vector<double>& v) {
    std::ostringstream os;
    os.precision(17);
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ']';
    return os.str();
}

}  // namespace

extern "C" {

const char* da2_version(void) { return "0.1.0"; }

const char* da2_last_error(void) { return g_last_error.c_str(); }

const char* da2_status_name(da2_status status) {
    switch (status) {
        case DA2_OK: return "ok";
        case DA2_ERR_CHECK: return "check failed";
        case DA2_ERR_CONFIG: return "config error";
        case DA2_ERR_NUMERIC: return "numeric error";
        case DA2_ERR_IO: return "io error";
        case DA2_ERR_SHAPE: return "shape error";
        case DA2_ERR_FORMAT: return "format error";
        case DA2_ERR_STATE: return "state error";
        case DA2_ERR_INTERNAL: return "internal error";
        case DA2_ERR_ARGUMENT: return "invalid argument";
    }
    return "unknown status";
}

void da2_string_free(char* s) { std::free(s); }

da2_status da2_network_create(const char* arch, const char* const* overrides, size_t n_overrides,
                              da2_network** out) {
    if (!arch || !out) return fail(DA2_ERR_ARGUMENT, "arch and out must be non-null");
    *out = nullptr;
    return guarded([&] { return make_network(with_overrides(da2::load_architecture(arch), overrides, n_overrides), out); });
}

da2_status da2_network_from_string(const char* config_text, const char* const* overrides, size_t n_overrides,
                                   da2_network** out) {
    if (!config_text || !out) return fail(DA2_ERR_ARGUMENT, "config_text and out must be non-null");
    *out = nullptr;
    return guarded([&] {
        return make_network(with_overrides(da2::ConfigDoc::parse(config_text), overrides, n_overrides), out);
    });
}

void da2_network_free(da2_network* net) { delete net; }

da2_status da2_network_param_count(da2_network* net, int64_t* out) {
    if (!net || !out) return fail(DA2_ERR_ARGUMENT, "net and out must be non-null");
    return guarded([&] {
        *out = net->net.parameter_count();
        return DA2_OK;
    });
}

da2_status da2_network_num_classes(const da2_network* net, int64_t* out) {
    if (!net || !out) return fail(DA2_ERR_ARGUMENT, "net and out must be non-null");
    *out = net->net.spec().num_classes;
    return DA2_OK;
}

da2_status da2_network_set_attention_enabled(da2_network* net, int enabled) {
    if (!net) return fail(DA2_ERR_ARGUMENT, "net must be non-null");
    net->net.set_attention_enabled(enabled != 0);
    return DA2_OK;
}

da2_status da2_network_forward(da2_network* net, const float* input, int64_t n, int64_t c, int64_t h, int64_t w,
                               float* logits, size_t logits_len) {
    if (!net || !input || !logits) return fail(DA2_ERR_ARGUMENT, "net, input and logits must be non-null");
    if (n < 1 || c < 1 || h < 1 || w < 1) return fail(DA2_ERR_ARGUMENT, "input extents must be positive");
    const auto k = net->net.spec().num_classes;
    if (logits_len < static_cast<size_t>(n * k)) {
        return fail(DA2_ERR_ARGUMENT, "logits buffer holds " + std::to_string(logits_len) + " floats, need " +
                                          std::to_string(n * k));
    }
    return guarded([&] {
        da2::Tensor x({n, c, h, w}, std::vector<float>(input, input + n * c * h * w));
        const da2::Tensor y = net->net.predict(x);
        std::memcpy(logits, y.ptr(), y.size() * sizeof(float));
        return DA2_OK;
    });
}

da2_status da2_network_save(da2_network* net, const char* path) {
    if (!net || !path) return fail(DA2_ERR_ARGUMENT, "net and path must be non-null");
    return guarded([&] {
        da2::save_checkpoint(net->net, path);
        return DA2_OK;
    });
}

da2_status da2_network_load(da2_network* net, const char* path) {
    if (!net || !path) return fail(DA2_ERR_ARGUMENT, "net and path must be non-null");
    return guarded([&] {
        da2::load_checkpoint(net->net, path);
        return DA2_OK;
    });
}

da2_status da2_analyze(const char* arch, const char* const* overrides, size_t n_overrides, const char* input,
                       const char* baseline_arch, int compare_without_attention, int json, char** report) {
    if (!arch || !report) return fail(DA2_ERR_ARGUMENT, "arch and report must be non-null");
    *report = nullptr;
    return guarded([&] {
        const auto doc = with_overrides(da2::load_architecture(arch), overrides, n_overrides);
        const auto backbone = da2::resolve_backbone(doc);
        const auto spec = da2::describe_backbone(backbone);
        const auto shape = da2::parse_input_shape(input ? input : "32x32", spec.in_channels);
        const auto r = da2::count_flops(spec, shape);
        std::optional<da2::CostReport> base;
        if (baseline_arch) {
            const auto bspec = da2::describe_backbone(da2::resolve_backbone(da2::load_architecture(baseline_arch)));
            base = da2::count_flops(bspec, shape);
        } else if (compare_without_attention) {
            base = da2::count_flops(da2::strip_attention(spec), shape);
        }
        const da2::CostReport* b = base ? &*base : nullptr;
        *report = dup_string(json ? da2::report_to_json(r, b) : da2::format_report_table(r, b));
        return DA2_OK;
    });
}

da2_status da2_train(const char* config_path, const char* const* overrides, size_t n_overrides, char** summary) {
    if (!config_path || !summary) return fail(DA2_ERR_ARGUMENT, "config_path and summary must be non-null");
    *summary = nullptr;
    return guarded([&] {
        auto doc = with_overrides(da2::ConfigDoc::load(config_path), overrides, n_overrides);
        da2::RunConfig rc = da2::resolve_run_config(doc);
        auto [train, eval] = da2::load_datasets(rc.data);
        if (train.classes != rc.backbone.num_classes) {
            throw da2::ConfigError("dataset has " + std::to_string(train.classes) + " classes, model.num_classes is " +
                                   std::to_string(rc.backbone.num_classes));
        }
        da2::ChannelStats stats{rc.data.mean, rc.data.stddev};
        if (stats.mean.empty()) {
            stats = da2::compute_channel_stats(train);
            doc.set("data", "mean", format_double_list(stats.mean));
            doc.set("data", "std", format_double_list(stats.stddev));
        }
        auto net = da2::Network<float>::build(rc.network_spec(), rc.train.seed);

        std::filesystem::create_directories(rc.output_dir);
        const std::string resolved = doc.serialize();
        da2::write_file_atomic(rc.output_dir / "config.resolved.toml",
                               std::span(reinterpret_cast<const std::uint8_t*>(resolved.data()), resolved.size()));
        const auto result = da2::train_loop(net, train, eval ? &*eval : nullptr, rc.train, stats, {rc.output_dir, {}});

        nlohmann::ordered_json j;
        j["output_dir"] = rc.output_dir.string();
        j["epochs"] = result.metrics.size();
        j["params"] = net.parameter_count();
        const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
        j["final_train_loss"] = result.metrics.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(result.metrics.back().train_loss);
        j["final_train_acc"] = result.metrics.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(result.metrics.back().train_acc);
        j["final_eval_acc"] = opt(result.final_eval_acc);
        j["best_eval_acc"] = opt(result.best_eval_acc);
        *summary = dup_string(j.dump(2));
        return DA2_OK;
    });
}

da2_status da2_gradcheck(const char* scope, uint64_t seed, const char* corrupt_op, char** report) {
    if (!scope || !report) return fail(DA2_ERR_ARGUMENT, "scope and report must be non-null");
    *report = nullptr;
    return guarded([&] {
        struct Restore {
            ~Restore() { da2::set_corrupted_vjp(""); }
        } restore;
        da2::set_corrupted_vjp(corrupt_op ? corrupt_op : "");
        const auto r = da2::run_gradcheck(scope, seed);
        *report = dup_string(da2::gradcheck_to_json(r));
        if (r.pass()) return DA2_OK;
        const auto bad = r.offenders();
        std::vector<std::string> scopes;
        for (const auto& e : bad) {
            if (std::find(scopes.begin(), scopes.end(), e.scope) == scopes.end()) scopes.push_back(e.scope);
        }
        std::string names;
        for (const auto& sc : scopes) names += (names.empty() ? "" : ", ") + sc;
        return fail(DA2_ERR_CHECK, std::to_string(bad.size()) + " gradient groups over tolerance in " + names);
    });
}

da2_status da2_bench(const char* arch, const char* const* overrides, size_t n_overrides, int64_t batch,
                     int64_t batches, int repeats, int warmup, int compare_attention, char** report) {
    if (!arch || !report) return fail(DA2_ERR_ARGUMENT, "arch and report must be non-null");
    *report = nullptr;
    return guarded([&] {
        const auto doc = with_overrides(da2::load_architecture(arch), overrides, n_overrides);
        const auto spec = da2::describe_backbone(da2::resolve_backbone(doc));
        auto net = da2::Network<float>::build(spec, model_seed(doc));
        da2::ThroughputOptions opts;
        opts.batch_size = batch;
        opts.batches = batches;
        opts.repeats = repeats;
        opts.warmup = warmup;
        if (!compare_attention) {
            *report = dup_string(da2::throughput_to_json(da2::measure_throughput(net, opts)));
            return DA2_OK;
        }
        if (spec.attention_count() == 0) {
            throw da2::ConfigError("--compare needs an architecture with attention enabled");
        }
        net.set_attention_enabled(false);
        const auto base = da2::measure_throughput(net, opts);
        net.set_attention_enabled(true);
        const auto attn = da2::measure_throughput(net, opts);
        nlohmann::ordered_json j;
        j["baseline"] = nlohmann::json::parse(da2::throughput_to_json(base));
        j["attention"] = nlohmann::json::parse(da2::throughput_to_json(attn));
        j["latency_overhead"] = attn.latency / base.latency - 1.0;
        *report = dup_string(j.dump(2));
        return DA2_OK;
    });
}

}  // extern "C"
