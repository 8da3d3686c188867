#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "da2net/backbone.hpp"
#include "da2net/data.hpp"
#include "da2net/trainer.hpp"

namespace da2 {

/// A small TOML subset: `[section]` headers, `key = value` lines, `#`
/// comments. Values are integers, floats, booleans, double-quoted strings or
/// flat arrays of those. Every key lives in a section.
class ConfigDoc {
   public:
    static ConfigDoc parse(const std::string& text, const std::string& origin = "<string>");
    static ConfigDoc load(const std::filesystem::path& file);

    /// "section.key=value"; the value uses the same syntax as the file.
    void apply_override(const std::string& assignment);
    void set(const std::string& section, const std::string& key, const std::string& raw_value);

    bool has(const std::string& section, const std::string& key) const;
    bool has_section(const std::string& section) const;

    std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
    std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key,
                                           const std::vector<std::int64_t>& fallback) const;
    std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                        const std::vector<double>& fallback) const;

    /// Raw text of a value as written (or as overridden).
    std::optional<std::string> raw(const std::string& section, const std::string& key) const;

    /// Throws ConfigError naming the first key not in `allowed` ("section.key"
    /// or "section.*").
    void reject_unknown(const std::set<std::string>& allowed) const;

    /// Canonical text form; parse(serialize()) reproduces the document.
    std::string serialize() const;

    const std::string& origin() const { return origin_; }

   private:
    std::map<std::string, std::map<std::string, std::string>> values_;
    std::vector<std::string> section_order_;
    std::string origin_;
};

struct DataConfig {
    std::string kind = "synth";  // synth | cifar100 | converted
    std::filesystem::path path;       // cifar100: directory; converted: train file
    std::filesystem::path test_path;  // converted: optional eval file
    int classes = 4;
    int per_class = 100;
    int eval_per_class = 50;
    std::uint64_t seed = 0;
    // Normalization; empty means computed from the training split.
    std::vector<double> mean, stddev;
};

struct RunConfig {
    BackboneConfig backbone;  // attention (if enabled) and insertion included
    TrainConfig train;
    DataConfig data;
    std::filesystem::path output_dir;
    ConfigDoc doc;  // overrides applied

    NetworkSpec network_spec() const { return describe_backbone(backbone); }
};

/// Builds and fully validates a run configuration: unknown keys, value ranges,
/// attention constraints at every insertion point and shape propagation.
RunConfig resolve_run_config(const ConfigDoc& doc);

/// Architecture-only view of a config (model + attention sections).
BackboneConfig resolve_backbone(const ConfigDoc& doc);

/// Loads train and eval splits as configured.
std::pair<Dataset, std::optional<Dataset>> load_datasets(const DataConfig& cfg);

/// "HxW" or "NxCxHxW" style input description.
Shape parse_input_shape(const std::string& text, std::int64_t channels);

std::vector<int> parse_int_csv(const std::string& text);

/// Built-in architecture descriptions: micro, resnet50_cifar, resnet101_cifar,
/// resnext50_cifar, wrn50_cifar.
const std::vector<std::string>& preset_names();
std::optional<std::string> preset_architecture(const std::string& name);

/// A preset name or a config file path.
ConfigDoc load_architecture(const std::string& name_or_path);

}  // namespace da2
