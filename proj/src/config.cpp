#include "da2net/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>

namespace da2 {
namespace {

struct Value;
using List = std::vector<Value>;
struct Value {
    std::variant<std::int64_t, double, bool, std::string, List> v;
};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing '#' comment that is not inside a string.
std::string strip_comment(std::string_view line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
        if (line[i] == '#' && !in_string) return std::string(line.substr(0, i));
    }
    return std::string(line);
}

class ValueParser {
   public:
    ValueParser(std::string_view text, std::string where) : s_(text), where_(std::move(where)) {}

    Value parse_all() {
        Value v = parse();
        skip_ws();
        if (pos_ != s_.size()) fail("unexpected trailing text");
        return v;
    }

   private:
    [[noreturn]] void fail(const std::string& why) const {
        throw ConfigError(where_ + ": " + why + " in value '" + std::string(s_) + "'");
    }
    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }
    Value parse() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '[') return parse_list();
        if (c == '"') return parse_string();
        return parse_scalar();
    }
    Value parse_list() {
        ++pos_;
        List items;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return {items};
        }
        while (true) {
            Value item = parse();
            if (std::holds_alternative<List>(item.v)) fail("nested arrays are not supported");
            items.push_back(std::move(item));
            skip_ws();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ',') {
                ++pos_;
                skip_ws();
                if (pos_ < s_.size() && s_[pos_] == ']') {
                    ++pos_;
                    break;
                }
                continue;
            }
            if (s_[pos_] == ']') {
                ++pos_;
                break;
            }
            fail("expected ',' or ']'");
        }
        return {items};
    }
    Value parse_string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) {
                const char e = s_[++pos_];
                out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
            } else {
                out += s_[pos_];
            }
            ++pos_;
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return {out};
    }
    Value parse_scalar() {
        const auto start = pos_;
        while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' && s_[pos_] != '\t') ++pos_;
        std::string tok(s_.substr(start, pos_ - start));
        if (tok == "true") return {true};
        if (tok == "false") return {false};
        std::string digits;
        for (char ch : tok) {
            if (ch != '_') digits += ch;
        }
        std::int64_t i = 0;
        auto [ip, iec] = std::from_chars(digits.data(), digits.data() + digits.size(), i);
        if (iec == std::errc() && ip == digits.data() + digits.size()) return {i};
        // from_chars for double is not available in this toolchain's libstdc++ for all targets; use strtod.
        char* end = nullptr;
        const double d = std::strtod(digits.c_str(), &end);
        if (!digits.empty() && end == digits.c_str() + digits.size()) return {d};
        fail("cannot parse '" + tok + "' (strings need double quotes)");
    }

    std::string_view s_;
    std::string where_;
    std::size_t pos_ = 0;
};

std::string where(const std::string& section, const std::string& key) { return section + "." + key; }

Value parse_raw(const std::string& raw, const std::string& section, const std::string& key) {
    return ValueParser(raw, where(section, key)).parse_all();
}

std::int64_t as_int(const Value& v, const std::string& w) {
    if (const auto* i = std::get_if<std::int64_t>(&v.v)) return *i;
    throw ConfigError(w + " must be an integer");
}

double as_double(const Value& v, const std::string& w) {
    if (const auto* i = std::get_if<std::int64_t>(&v.v)) return static_cast<double>(*i);
    if (const auto* d = std::get_if<double>(&v.v)) return *d;
    throw ConfigError(w + " must be a number");
}

bool is_identifier(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    }
    return true;
}

}  // namespace

ConfigDoc ConfigDoc::parse(const std::string& text, const std::string& origin) {
    ConfigDoc doc;
    doc.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string at = origin + ":" + std::to_string(lineno);
        const std::string body = trim(strip_comment(line));
        if (body.empty()) continue;
        if (body.front() == '[') {
            if (body.back() != ']') throw ConfigError(at + ": malformed section header");
            section = trim(std::string_view(body).substr(1, body.size() - 2));
            if (!is_identifier(section)) throw ConfigError(at + ": invalid section name '" + section + "'");
            if (doc.values_.count(section)) throw ConfigError(at + ": duplicate section [" + section + "]");
            doc.values_[section];
            doc.section_order_.push_back(section);
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(at + ": expected 'key = value'");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (section.empty()) throw ConfigError(at + ": key '" + key + "' outside any [section]");
        if (!is_identifier(key)) throw ConfigError(at + ": invalid key '" + key + "'");
        if (doc.values_[section].count(key)) throw ConfigError(at + ": duplicate key " + where(section, key));
        ValueParser(value, at).parse_all();
        doc.values_[section][key] = value;
    }
    return doc;
}

ConfigDoc ConfigDoc::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), file.string());
}

void ConfigDoc::set(const std::string& section, const std::string& key, const std::string& raw_value) {
    if (!is_identifier(section) || !is_identifier(key)) {
        throw ConfigError("invalid override key '" + where(section, key) + "'");
    }
    std::string value = trim(raw_value);
    try {
        ValueParser(value, "override " + where(section, key)).parse_all();
    } catch (const ConfigError&) {
        // Shell users rarely keep the quotes: accept a bare word or path as a string.
        const bool bare = !value.empty() && value.find_first_of("\"[],\\") == std::string::npos;
        if (!bare) throw;
        value = '"' + value + '"';
    }
    if (!values_.count(section)) section_order_.push_back(section);
    values_[section][key] = value;
}

void ConfigDoc::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override '" + assignment + "' must look like section.key=value");
    }
    set(trim(std::string_view(assignment).substr(0, dot)), trim(std::string_view(assignment).substr(dot + 1, eq - dot - 1)),
        assignment.substr(eq + 1));
}

bool ConfigDoc::has(const std::string& section, const std::string& key) const { return raw(section, key).has_value(); }

bool ConfigDoc::has_section(const std::string& section) const { return values_.count(section) != 0; }

std::optional<std::string> ConfigDoc::raw(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    if (s == values_.end()) return std::nullopt;
    const auto k = s->second.find(key);
    if (k == s->second.end()) return std::nullopt;
    return k->second;
}

std::int64_t ConfigDoc::get_int(const std::string& section, const std::string& key, std::int64_t fallback) const {
    const auto r = raw(section, key);
    return r ? as_int(parse_raw(*r, section, key), where(section, key)) : fallback;
}

double ConfigDoc::get_double(const std::string& section, const std::string& key, double fallback) const {
    const auto r = raw(section, key);
    return r ? as_double(parse_raw(*r, section, key), where(section, key)) : fallback;
}

bool ConfigDoc::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const auto r = raw(section, key);
    if (!r) return fallback;
    const Value v = parse_raw(*r, section, key);
    if (const auto* b = std::get_if<bool>(&v.v)) return *b;
    throw ConfigError(where(section, key) + " must be true or false");
}

std::string ConfigDoc::get_string(const std::string& section, const std::string& key,
                                  const std::string& fallback) const {
    const auto r = raw(section, key);
    if (!r) return fallback;
    const Value v = parse_raw(*r, section, key);
    if (const auto* s = std::get_if<std::string>(&v.v)) return *s;
    throw ConfigError(where(section, key) + " must be a quoted string");
}

std::vector<std::int64_t> ConfigDoc::get_int_list(const std::string& section, const std::string& key,
                                                  const std::vector<std::int64_t>& fallback) const {
    const auto r = raw(section, key);
    if (!r) return fallback;
    const Value v = parse_raw(*r, section, key);
    const auto* list = std::get_if<List>(&v.v);
    if (!list) throw ConfigError(where(section, key) + " must be an array of integers");
    std::vector<std::int64_t> out;
    for (const auto& item : *list) out.push_back(as_int(item, where(section, key) + " element"));
    return out;
}

std::vector<double> ConfigDoc::get_double_list(const std::string& section, const std::string& key,
                                               const std::vector<double>& fallback) const {
    const auto r = raw(section, key);
    if (!r) return fallback;
    const Value v = parse_raw(*r, section, key);
    const auto* list = std::get_if<List>(&v.v);
    if (!list) throw ConfigError(where(section, key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& item : *list) out.push_back(as_double(item, where(section, key) + " element"));
    return out;
}

void ConfigDoc::reject_unknown(const std::set<std::string>& allowed) const {
    for (const auto& [section, keys] : values_) {
        for (const auto& [key, _] : keys) {
            if (!allowed.count(where(section, key)) && !allowed.count(section + ".*")) {
                throw ConfigError("unknown config key " + where(section, key));
            }
        }
    }
}

std::string ConfigDoc::serialize() const {
    std::ostringstream os;
    bool first = true;
    for (const auto& section : section_order_) {
        if (!first) os << '\n';
        first = false;
        os << '[' << section << "]\n";
        for (const auto& [key, value] : values_.at(section)) os << key << " = " << value << '\n';
    }
    return os.str();
}

namespace {

int checked_int(std::int64_t v, const std::string& w) {
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw ConfigError(w + " is out of range");
    }
    return static_cast<int>(v);
}

std::vector<int> int_list(const ConfigDoc& doc, const std::string& s, const std::string& k, std::vector<int> fallback) {
    std::vector<std::int64_t> fb(fallback.begin(), fallback.end());
    std::vector<int> out;
    for (auto v : doc.get_int_list(s, k, fb)) out.push_back(checked_int(v, where(s, k)));
    return out;
}

const std::set<std::string>& allowed_keys() {
    static const std::set<std::string> keys = {
        "model.block",         "model.widths",       "model.blocks",          "model.num_classes",
        "model.in_channels",   "model.cardinality",  "model.base_width",      "attention.enabled",
        "attention.filters",   "attention.g",        "attention.alpha",       "attention.pointwise",
        "attention.adaptive",  "attention.enforce_ascending", "attention.insert", "train.lr",
        "train.momentum",      "train.weight_decay", "train.batch_size",      "train.epochs",
        "train.lr_decay",      "train.lr_period",    "train.seed",            "train.eval_period",
        "train.augment",       "train.pad",          "train.crop",            "train.flip",
        "data.kind",           "data.path",          "data.test_path",        "data.classes",
        "data.per_class",      "data.eval_per_class", "data.seed",            "data.mean",
        "data.std",            "output.dir",
    };
    return keys;
}

}  // namespace

BackboneConfig resolve_backbone(const ConfigDoc& doc) {
    doc.reject_unknown(allowed_keys());
    BackboneConfig b;
    b.block = parse_block_kind(doc.get_string("model", "block", to_string(b.block)));
    b.widths = int_list(doc, "model", "widths", b.widths);
    b.blocks = int_list(doc, "model", "blocks", b.blocks);
    b.num_classes = checked_int(doc.get_int("model", "num_classes", b.num_classes), "model.num_classes");
    b.in_channels = checked_int(doc.get_int("model", "in_channels", b.in_channels), "model.in_channels");
    b.cardinality = checked_int(doc.get_int("model", "cardinality", b.cardinality), "model.cardinality");
    b.base_width = checked_int(doc.get_int("model", "base_width", b.base_width), "model.base_width");

    if (doc.get_bool("attention", "enabled", doc.has_section("attention"))) {
        const auto filters = int_list(doc, "attention", "filters", {3, 5, 7});
        const int g = checked_int(doc.get_int("attention", "g", 1), "attention.g");
        const int alpha = checked_int(doc.get_int("attention", "alpha", 9), "attention.alpha");
        AttentionBlockConfig a = AttentionBlockConfig::from_filters(filters, g, alpha);
        const bool pointwise = doc.get_bool("attention", "pointwise", false);
        for (auto& l : a.layers) l.use_pointwise_reduction = pointwise;
        a.adaptive_selection = doc.get_bool("attention", "adaptive", true);
        a.enforce_ascending = doc.get_bool("attention", "enforce_ascending", true);
        b.attention = a;
        const auto insert = doc.raw("attention", "insert");
        if (insert && !insert->empty() && insert->front() == '[') {
            b.insertion = InsertionPolicy::at(int_list(doc, "attention", "insert", {}));
        } else if (!insert || doc.get_string("attention", "insert", "") == "all") {
            b.insertion = InsertionPolicy::all_bottlenecks();
        } else {
            throw ConfigError("attention.insert must be \"all\" or an array of insertion indices");
        }
    }
    validate_backbone_config(b);
    const NetworkSpec spec = describe_backbone(b);
    propagate_shapes(spec, {1, spec.in_channels, kImageExtent, kImageExtent});
    return b;
}

RunConfig resolve_run_config(const ConfigDoc& doc) {
    RunConfig rc;
    rc.doc = doc;
    rc.backbone = resolve_backbone(doc);

    TrainConfig& t = rc.train;
    t.lr = doc.get_double("train", "lr", t.lr);
    t.momentum = doc.get_double("train", "momentum", t.momentum);
    t.weight_decay = doc.get_double("train", "weight_decay", t.weight_decay);
    t.batch_size = checked_int(doc.get_int("train", "batch_size", t.batch_size), "train.batch_size");
    t.epochs = checked_int(doc.get_int("train", "epochs", t.epochs), "train.epochs");
    t.lr_decay = doc.get_double("train", "lr_decay", t.lr_decay);
    t.lr_period = checked_int(doc.get_int("train", "lr_period", t.lr_period), "train.lr_period");
    const auto seed = doc.get_int("train", "seed", 0);
    if (seed < 0) throw ConfigError("train.seed must be >= 0");
    t.seed = static_cast<std::uint64_t>(seed);
    t.eval_period = checked_int(doc.get_int("train", "eval_period", t.eval_period), "train.eval_period");
    t.augment = doc.get_bool("train", "augment", t.augment);
    t.augment_spec.pad = checked_int(doc.get_int("train", "pad", t.augment_spec.pad), "train.pad");
    t.augment_spec.crop = checked_int(doc.get_int("train", "crop", t.augment_spec.crop), "train.crop");
    t.augment_spec.flip_probability = doc.get_double("train", "flip", t.augment_spec.flip_probability);
    validate_train_config(t);

    DataConfig& d = rc.data;
    d.kind = doc.get_string("data", "kind", d.kind);
    d.path = doc.get_string("data", "path", "");
    d.test_path = doc.get_string("data", "test_path", "");
    d.classes = checked_int(doc.get_int("data", "classes", d.classes), "data.classes");
    d.per_class = checked_int(doc.get_int("data", "per_class", d.per_class), "data.per_class");
    d.eval_per_class = checked_int(doc.get_int("data", "eval_per_class", d.eval_per_class), "data.eval_per_class");
    const auto dseed = doc.get_int("data", "seed", 0);
    if (dseed < 0) throw ConfigError("data.seed must be >= 0");
    d.seed = static_cast<std::uint64_t>(dseed);
    d.mean = doc.get_double_list("data", "mean", {});
    d.stddev = doc.get_double_list("data", "std", {});
    if (d.mean.size() != d.stddev.size()) throw ConfigError("data.mean and data.std must have equal length");
    if (!d.mean.empty() && d.mean.size() != static_cast<std::size_t>(rc.backbone.in_channels)) {
        throw ConfigError("data.mean needs one entry per input channel");
    }
    for (double s : d.stddev) {
        if (!(s > 0)) throw ConfigError("data.std entries must be > 0");
    }
    if (d.kind == "synth") {
        if (d.classes < 2) throw ConfigError("data.classes must be >= 2");
        if (d.per_class < 1) throw ConfigError("data.per_class must be >= 1");
        if (d.eval_per_class < 0) throw ConfigError("data.eval_per_class must be >= 0");
        if (d.classes != rc.backbone.num_classes) {
            throw ConfigError("data.classes (" + std::to_string(d.classes) + ") differs from model.num_classes (" +
                              std::to_string(rc.backbone.num_classes) + ")");
        }
    } else if (d.kind == "cifar100") {
        if (d.path.empty()) throw ConfigError("data.path must name the CIFAR-100 directory");
        if (!std::filesystem::exists(d.path / "train.bin")) throw IoError("missing dataset file " + (d.path / "train.bin").string());
        if (rc.backbone.num_classes != 100) throw ConfigError("cifar100 needs model.num_classes = 100");
    } else if (d.kind == "converted") {
        if (d.path.empty()) throw ConfigError("data.path must name the converted training file");
        if (!std::filesystem::exists(d.path)) throw IoError("missing dataset file " + d.path.string());
        if (!d.test_path.empty() && !std::filesystem::exists(d.test_path)) {
            throw IoError("missing dataset file " + d.test_path.string());
        }
    } else {
        throw ConfigError("data.kind must be one of synth, cifar100, converted (got '" + d.kind + "')");
    }
    rc.output_dir = doc.get_string("output", "dir", "runs/default");
    if (rc.output_dir.empty()) throw ConfigError("output.dir must not be empty");
    return rc;
}

std::pair<Dataset, std::optional<Dataset>> load_datasets(const DataConfig& cfg) {
    if (cfg.kind == "synth") {
        Dataset train = synth_dataset(cfg.classes, cfg.per_class, cfg.seed);
        std::optional<Dataset> eval;
        // A distinct seed stream keeps the eval images disjoint from training.
        if (cfg.eval_per_class > 0) eval = synth_dataset(cfg.classes, cfg.eval_per_class, splitmix64(cfg.seed ^ 0xE7A1));
        return {std::move(train), std::move(eval)};
    }
    if (cfg.kind == "cifar100") {
        Dataset train = load_cifar100(cfg.path, Split::Train);
        std::optional<Dataset> eval;
        if (std::filesystem::exists(cfg.path / "test.bin")) eval = load_cifar100(cfg.path, Split::Test);
        return {std::move(train), std::move(eval)};
    }
    Dataset train = load_converted(cfg.path);
    std::optional<Dataset> eval;
    if (!cfg.test_path.empty()) eval = load_converted(cfg.test_path);
    if (eval && eval->classes != train.classes) throw FormatError("train and eval class counts differ");
    return {std::move(train), std::move(eval)};
}

std::vector<int> parse_int_csv(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = trim(item);
        int v = 0;
        const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
            throw ConfigError("expected a comma-separated list of integers, got '" + text + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("empty integer list");
    return out;
}

Shape parse_input_shape(const std::string& text, std::int64_t channels) {
    std::string s = text;
    for (char& c : s) {
        if (c == 'x' || c == 'X') c = ',';
    }
    const auto parts = parse_int_csv(s);
    for (int p : parts) {
        if (p < 1) throw ConfigError("input extents must be positive, got '" + text + "'");
    }
    if (parts.size() == 2) return {1, channels, parts[0], parts[1]};
    if (parts.size() == 4) {
        if (parts[1] != channels) throw ConfigError("input channel count differs from model.in_channels");
        return {parts[0], parts[1], parts[2], parts[3]};
    }
    throw ConfigError("input shape must be HxW or NxCxHxW, got '" + text + "'");
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"micro", "resnet50_cifar", "resnet101_cifar", "resnext50_cifar",
                                                   "wrn50_cifar"};
    return names;
}

std::optional<std::string> preset_architecture(const std::string& name) {
    // CIFAR adaptations: 3x3 stride-1 stem, no max-pool, 100-way head.
    static const std::map<std::string, std::string> presets = {
        {"micro", "[model]\nblock = \"basic\"\nwidths = [16, 32, 64]\nblocks = [2, 2, 2]\nnum_classes = 4\n"},
        {"resnet50_cifar",
         "[model]\nblock = \"bottleneck\"\nwidths = [64, 128, 256, 512]\nblocks = [3, 4, 6, 3]\nnum_classes = 100\n"},
        {"resnet101_cifar",
         "[model]\nblock = \"bottleneck\"\nwidths = [64, 128, 256, 512]\nblocks = [3, 4, 23, 3]\nnum_classes = 100\n"},
        {"resnext50_cifar",
         "[model]\nblock = \"bottleneck\"\nwidths = [64, 128, 256, 512]\nblocks = [3, 4, 6, 3]\nnum_classes = 100\n"
         "cardinality = 32\nbase_width = 4\n"},
        {"wrn50_cifar",
         "[model]\nblock = \"bottleneck\"\nwidths = [64, 128, 256, 512]\nblocks = [3, 4, 6, 3]\nnum_classes = 100\n"
         "base_width = 128\n"},
    };
    const auto it = presets.find(name);
    if (it == presets.end()) return std::nullopt;
    return it->second;
}

ConfigDoc load_architecture(const std::string& name_or_path) {
    if (const auto text = preset_architecture(name_or_path)) return ConfigDoc::parse(*text, "preset:" + name_or_path);
    if (!std::filesystem::exists(name_or_path)) {
        std::string list;
        for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
        throw ConfigError("'" + name_or_path + "' is neither a config file nor a preset (" + list + ")");
    }
    return ConfigDoc::load(name_or_path);
}

}  // namespace da2
