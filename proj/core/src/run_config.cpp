#include "mlit/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

namespace mlit {

namespace {

std::string format_value(const std::string& v) { return v; }
std::string format_value(bool v) { return v ? "true" : "false"; }
template <class T>
    requires std::is_arithmetic_v<T>
std::string format_value(T v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
        return text;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes" || text == "on")
            return true;
        if (text == "false" || text == "0" || text == "no" || text == "off")
            return false;
        throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
    } else {
        T v{};
        const auto* end = text.data() + text.size();
        auto res = std::from_chars(text.data(), end, v);
        if (res.ec != std::errc() || res.ptr != end)
            throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
        return v;
    }
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field field(std::string key, T RunConfig::*member) {
    return Field{key, [member](const RunConfig& c) { return format_value(c.*member); },
                 [member, key](RunConfig& c, const std::string& v) { c.*member = parse_value<T>(key, v); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        field("alpha", &RunConfig::alpha),
        field("base_lr", &RunConfig::base_lr),
        field("batch", &RunConfig::batch),
        field("beta", &RunConfig::beta),
        field("checkpoint_every", &RunConfig::checkpoint_every),
        field("classes", &RunConfig::classes),
        field("command", &RunConfig::command),
        field("crop_hi", &RunConfig::crop_hi),
        field("crop_lo", &RunConfig::crop_lo),
        field("data_root", &RunConfig::data_root),
        field("dataset", &RunConfig::dataset),
        field("decoder_aux", &RunConfig::decoder_aux),
        field("decoder_pos_embed", &RunConfig::decoder_pos_embed),
        field("dropout", &RunConfig::dropout),
        field("dtype", &RunConfig::dtype),
        field("epochs", &RunConfig::epochs),
        field("eval_split", &RunConfig::eval_split),
        field("hflip", &RunConfig::hflip),
        field("init_checkpoint", &RunConfig::init_checkpoint),
        field("layer_decay", &RunConfig::layer_decay),
        field("mask_ratio", &RunConfig::mask_ratio),
        field("out_dir", &RunConfig::out_dir),
        field("quiet", &RunConfig::quiet),
        field("resume", &RunConfig::resume),
        field("seed", &RunConfig::seed),
        field("sharing", &RunConfig::sharing),
        field("size", &RunConfig::size),
        field("squared_cv", &RunConfig::squared_cv),
        field("stop_after_epoch", &RunConfig::stop_after_epoch),
        field("synthetic_classes", &RunConfig::synthetic_classes),
        field("synthetic_test", &RunConfig::synthetic_test),
        field("synthetic_train", &RunConfig::synthetic_train),
        field("test_limit", &RunConfig::test_limit),
        field("train_limit", &RunConfig::train_limit),
        field("w_importance", &RunConfig::w_importance),
        field("w_load", &RunConfig::w_load),
        field("warmup_epochs", &RunConfig::warmup_epochs),
        field("weight_decay", &RunConfig::weight_decay),
    };
    return table;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

RunConfig recipe_defaults(const std::string& command, const std::string& size, const std::string& dataset) {
    RunConfig c;
    c.command = command;
    c.size = size;
    c.dataset = dataset;
    if (command == "pretrain") {
        c.dataset = dataset == "synthetic" ? dataset : "cifar100";
        c.base_lr = 3e-4;
        c.weight_decay = 0.05;
        c.epochs = size == "S" ? 4000 : size == "XS" ? 6000 : 8000;
        c.warmup_epochs = default_warmup_epochs(c.epochs);
        c.batch = size == "S" ? 840 : 1280;
        c.crop_lo = 0.6;
        c.crop_hi = 1.0;
        c.layer_decay = 1.0;
    } else if (command == "finetune") {
        c.epochs = 300;
        c.warmup_epochs = 20;
        c.batch = 448;
        c.base_lr = 5e-3;
        c.layer_decay = 0.9;
        c.crop_lo = 0.8;
        c.crop_hi = 1.0;
    } else if (command == "train") {
        c.epochs = 300;
        c.crop_lo = 0.8;
        c.crop_hi = 1.0;
        if (auto row = supervised_recipe(dataset)) {
            c.batch = row->batch;
            c.base_lr = row->base_lr;
            c.layer_decay = row->layer_decay;
            c.warmup_epochs = row->warmup_epochs;
        } else {
            const auto cifar = *supervised_recipe("cifar100");
            c.batch = cifar.batch;
            c.base_lr = cifar.base_lr;
            c.layer_decay = cifar.layer_decay;
            c.warmup_epochs = cifar.warmup_epochs;
        }
    } else if (command != "eval") {
        throw ConfigError("unknown command '" + command + "'");
    }
    return c;
}

std::optional<RecipeRow> transfer_recipe(const std::string& dataset) {
    if (dataset == "flowers102")
        return RecipeRow{16, 10e-3, 0.9, 10};
    if (dataset == "svhn")
        return RecipeRow{256, 2.5e-3, 0.9, 10};
    if (dataset == "cifar10")
        return RecipeRow{256, 2.5e-3, 0.8, 5};
    if (dataset == "cifar100")
        return RecipeRow{128, 5e-3, 0.9, 5};
    return std::nullopt;
}

std::optional<RecipeRow> supervised_recipe(const std::string& dataset) {
    if (dataset == "flowers102")
        return RecipeRow{16, 10e-3, 1.0, 10};
    if (dataset == "svhn")
        return RecipeRow{256, 1e-3, 1.0, 10};
    if (dataset == "cifar10")
        return RecipeRow{256, 1e-3, 1.0, 5};
    if (dataset == "cifar100")
        return RecipeRow{128, 2e-3, 1.0, 5};
    return std::nullopt;
}

void apply_transfer_recipe(RunConfig& cfg) {
    auto row = transfer_recipe(cfg.dataset);
    if (!row)
        throw ConfigError("no transfer recipe for dataset '" + cfg.dataset + "'");
    cfg.epochs = 100;
    cfg.batch = row->batch;
    cfg.base_lr = row->base_lr;
    cfg.layer_decay = row->layer_decay;
    cfg.warmup_epochs = row->warmup_epochs;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields())
        keys.push_back(f.key);
    return keys;
}

std::map<std::string, std::string> to_map(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& f : fields())
        out[f.key] = f.get(cfg);
    return out;
}

void set_field(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : fields())
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

void apply_map(RunConfig& cfg, const std::map<std::string, std::string>& values) {
    for (const auto& [k, v] : values)
        set_field(cfg, k, v);
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (auto hash = line.find('#'); hash != std::string::npos)
            line.resize(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(number) + ": empty key");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in)
        throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string format_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : to_map(cfg))
        out += k + " = " + v + "\n";
    return out;
}

void write_config_file(const std::filesystem::path& file, const RunConfig& cfg) {
    std::ofstream out(file);
    if (!out)
        throw ConfigError("cannot write config file " + file.string());
    out << format_config(cfg);
}

void validate(const RunConfig& c) {
    if (c.command != "pretrain" && c.command != "finetune" && c.command != "train" && c.command != "eval")
        throw ConfigError("unknown command '" + c.command + "'");
    parse_source(c.dataset);
    parse_sharing_mode(c.sharing);
    if (c.dtype != "f32" && c.dtype != "f64")
        throw ConfigError("dtype must be f32 or f64");
    if (c.eval_split != "train" && c.eval_split != "test")
        throw ConfigError("eval_split must be train or test");
    if (c.batch <= 0 || c.epochs <= 0)
        throw ConfigError("batch and epochs must be positive");
    if (c.warmup_epochs < 0 || c.warmup_epochs >= c.epochs)
        throw ConfigError("warmup_epochs must be in [0, epochs)");
    if (c.train_limit < 0 || c.test_limit < 0 || c.checkpoint_every < 0 || c.stop_after_epoch < 0)
        throw ConfigError("limits and checkpoint intervals must be non-negative");
    if (c.dropout < 0.0 || c.dropout >= 1.0)
        throw ConfigError("dropout must be in [0, 1)");
    validate(augment_config(c));
    validate(model_config(c));
    if (c.command == "pretrain")
        validate(decoder_config(c));
}

MLiTConfig model_config(const RunConfig& c) {
    MLiTConfig m = mlit_preset(c.size);
    m.dropout = c.dropout;
    m.sharing = parse_sharing_mode(c.sharing);
    m.w_importance = c.w_importance;
    m.w_load = c.w_load;
    m.squared_cv = c.squared_cv;
    if (c.classes > 0)
        m.classes = c.classes;
    else if (c.dataset == "cifar10")
        m.classes = 10;
    else if (c.dataset == "synthetic")
        m.classes = c.synthetic_classes;
    else
        m.classes = 100;
    return m;
}

DecoderConfig decoder_config(const RunConfig& c) {
    DecoderConfig d = decoder_preset();
    d.dropout = c.dropout;
    d.sharing = parse_sharing_mode(c.sharing);
    d.w_importance = c.w_importance;
    d.w_load = c.w_load;
    d.squared_cv = c.squared_cv;
    d.include_aux = c.decoder_aux;
    d.separate_pos_embed = c.decoder_pos_embed;
    return d;
}

AugmentConfig augment_config(const RunConfig& c) {
    AugmentConfig a;
    a.crop_lo = c.crop_lo;
    a.crop_hi = c.crop_hi;
    a.hflip_p = c.hflip;
    return a;
}

AdamWOptions optimizer_options(const RunConfig& c) {
    AdamWOptions o;
    o.weight_decay = c.weight_decay;
    return o;
}

DType run_dtype(const RunConfig& c) { return c.dtype == "f64" ? DType::f64 : DType::f32; }

std::filesystem::path resolve_data_root(const RunConfig& c) {
    if (!c.data_root.empty())
        return c.data_root;
    if (const char* env = std::getenv("MLIT_DATA_ROOT"); env && *env)
        return env;
    return {};
}

RunConfig resolve_run_config(const std::string& command, bool transfer,
                             std::map<std::string, std::string> file_values,
                             const std::map<std::string, std::string>& cli_values) {
    auto pick = [&](const std::string& key, const std::string& fallback) {
        if (auto it = cli_values.find(key); it != cli_values.end())
            return it->second;
        if (auto it = file_values.find(key); it != file_values.end())
            return it->second;
        return fallback;
    };
    RunConfig cfg = recipe_defaults(command, pick("size", "XXS"), pick("dataset", "cifar100"));
    if (transfer)
        apply_transfer_recipe(cfg);
    const double recipe_epochs = cfg.epochs, recipe_warmup = cfg.warmup_epochs;
    file_values.erase("command");
    apply_map(cfg, file_values);
    apply_map(cfg, cli_values);
    cfg.command = command;
    if (!file_values.contains("warmup_epochs") && !cli_values.contains("warmup_epochs") &&
        cfg.epochs != recipe_epochs)
        cfg.warmup_epochs = recipe_warmup * cfg.epochs / recipe_epochs;
    validate(cfg);
    return cfg;
}

} // namespace mlit
