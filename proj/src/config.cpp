#include "grounder/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace grounder {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_value(const char* key, const std::string& v);

template <>
long parse_value<long>(const char* key, const std::string& v) {
    try {
        size_t pos = 0;
        const long out = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(std::string("config key '") + key + "': not an integer: " + v);
    }
}

template <>
int parse_value<int>(const char* key, const std::string& v) {
    return static_cast<int>(parse_value<long>(key, v));
}

template <>
std::uint64_t parse_value<std::uint64_t>(const char* key, const std::string& v) {
    try {
        size_t pos = 0;
        const auto out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(std::string("config key '") + key + "': not an integer: " + v);
    }
}

template <>
double parse_value<double>(const char* key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(std::string("config key '") + key + "': not a number: " + v);
    }
}

template <>
std::string parse_value<std::string>(const char* key, const std::string& v) {
    (void)key;
    return v;
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(const std::string& v) { return v; }
std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Key {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(RunConfig&)> get;
};

template <class T, class Ref>
Key make_key(const char* name, Ref ref) {
    return {name,
            [name, ref](RunConfig& c, const std::string& v) { ref(c) = parse_value<T>(name, v); },
            [ref](RunConfig& c) { return format_value(ref(c)); }};
}

const std::vector<Key>& key_table() {
    static const std::vector<Key> keys = [] {
        std::vector<Key> k;
        auto I = [&](const char* n, auto ref) { k.push_back(make_key<int>(n, ref)); };
        auto D = [&](const char* n, auto ref) { k.push_back(make_key<double>(n, ref)); };
        auto U = [&](const char* n, auto ref) { k.push_back(make_key<std::uint64_t>(n, ref)); };
        auto S = [&](const char* n, auto ref) { k.push_back(make_key<std::string>(n, ref)); };

        S("dataset_dir", [](RunConfig& c) -> std::string& { return c.dataset_dir; });
        S("out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; });

        I("model.image_size", [](RunConfig& c) -> int& { return c.model.image_size; });
        I("model.image_channels", [](RunConfig& c) -> int& { return c.model.image_channels; });
        I("model.vision_backbone_channels",
          [](RunConfig& c) -> int& { return c.model.vision_backbone_channels; });
        I("model.vision_stride", [](RunConfig& c) -> int& { return c.model.vision_stride; });
        I("model.vision_tf_layers", [](RunConfig& c) -> int& { return c.model.vision_tf_layers; });
        I("model.vision_width", [](RunConfig& c) -> int& { return c.model.vision_width; });
        I("model.text_vocab_size", [](RunConfig& c) -> int& { return c.model.text_vocab_size; });
        I("model.text_tf_layers", [](RunConfig& c) -> int& { return c.model.text_tf_layers; });
        I("model.text_width", [](RunConfig& c) -> int& { return c.model.text_width; });
        I("model.max_text_len", [](RunConfig& c) -> int& { return c.model.max_text_len; });
        I("model.fused_width", [](RunConfig& c) -> int& { return c.model.fused_width; });
        I("model.vlt_layers", [](RunConfig& c) -> int& { return c.model.vlt_layers; });
        I("model.vlt_heads", [](RunConfig& c) -> int& { return c.model.vlt_heads; });
        I("model.mlp_hidden", [](RunConfig& c) -> int& { return c.model.mlp_hidden; });
        D("model.dropout", [](RunConfig& c) -> double& { return c.model.dropout; });

        I("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
        D("train.lr_vision", [](RunConfig& c) -> double& { return c.train.lr_vision; });
        D("train.lr_text", [](RunConfig& c) -> double& { return c.train.lr_text; });
        D("train.lr_vlt", [](RunConfig& c) -> double& { return c.train.lr_vlt; });
        I("train.lr_drop_epoch", [](RunConfig& c) -> int& { return c.train.lr_drop_epoch; });
        D("train.lr_drop_factor", [](RunConfig& c) -> double& { return c.train.lr_drop_factor; });
        I("train.warmup_steps", [](RunConfig& c) -> int& { return c.train.warmup_steps; });
        D("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        I("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
        U("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
        D("train.lambda", [](RunConfig& c) -> double& { return c.train.lambda; });
        D("train.mu", [](RunConfig& c) -> double& { return c.train.mu; });
        D("train.tau", [](RunConfig& c) -> double& { return c.train.tau; });
        I("train.negatives", [](RunConfig& c) -> int& { return c.train.negatives; });
        D("train.iou_ceiling", [](RunConfig& c) -> double& { return c.train.iou_ceiling; });
        D("train.neg_min_size", [](RunConfig& c) -> double& { return c.train.neg_min_size; });

        I("synth.image_size", [](RunConfig& c) -> int& { return c.synth.image_size; });
        I("synth.n_samples", [](RunConfig& c) -> int& { return c.synth.n_samples; });
        I("synth.shapes_min", [](RunConfig& c) -> int& { return c.synth.shapes_min; });
        I("synth.shapes_max", [](RunConfig& c) -> int& { return c.synth.shapes_max; });
        D("synth.noise", [](RunConfig& c) -> double& { return c.synth.noise; });
        D("synth.contrast", [](RunConfig& c) -> double& { return c.synth.contrast; });
        U("synth.seed", [](RunConfig& c) -> std::uint64_t& { return c.synth.seed; });
        I("synth.patient_block", [](RunConfig& c) -> int& { return c.synth.patient_block; });

        D("split.train", [](RunConfig& c) -> double& { return c.split.train; });
        D("split.val", [](RunConfig& c) -> double& { return c.split.val; });
        D("split.test", [](RunConfig& c) -> double& { return c.split.test; });
        U("split.seed", [](RunConfig& c) -> std::uint64_t& { return c.split.seed; });
        return k;
    }();
    return keys;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    synth.validate();
    split.validate();
    if (dataset_dir.empty()) throw ConfigError("dataset_dir must be set");
    if (out_dir.empty()) throw ConfigError("out_dir must be set");
}

RunConfig preset_config(const std::string& name) {
    RunConfig cfg;
    if (name == "toy") {
        cfg.preset = "toy";
        cfg.model = ModelConfig::toy();
        // Desk-scale protocol: short schedule, larger rates than the
        // full-scale defaults since nothing is pretrained. Rates much above
        // these destabilize the post-norm encoders, warmup or not; small
        // batches trade noise for update count, which wins here.
        cfg.train.epochs = 30;
        cfg.train.lr_drop_epoch = 24;
        cfg.train.lr_vision = 3e-4;
        cfg.train.lr_text = 3e-4;
        cfg.train.lr_vlt = 1e-3;
        cfg.train.batch_size = 8;
        // Contrastive logits are raw feature dots; at this width their scale
        // is tens, so the temperature moves up with it.
        cfg.train.tau = 32.0;
        cfg.synth.n_samples = 2500;
        cfg.synth.noise = 0.02;
        cfg.synth.shapes_max = 4;
    } else if (name == "paper" || name == "full") {
        cfg.preset = name;
        cfg.model = ModelConfig::full();
        cfg.train = TrainConfig{};  // 90 epochs, drop at 60, 1e-5/1e-5/5e-5
        cfg.synth.n_samples = 2500;
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected toy or paper)");
    }
    return cfg;
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "preset") {
        const std::string keep_data = cfg.dataset_dir, keep_out = cfg.out_dir;
        cfg = preset_config(value);
        cfg.dataset_dir = keep_data;
        cfg.out_dir = keep_out;
        return;
    }
    for (const auto& k : key_table())
        if (key == k.name) {
            k.set(cfg, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::istringstream is(text);
    std::string line;
    long ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(ln) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(ln) + ": empty key");
        pairs.emplace_back(key, value);
    }

    RunConfig cfg;
    // The preset populates the baseline; explicit keys override in order.
    for (const auto& [k, v] : pairs)
        if (k == "preset") apply_key(cfg, k, v);
    for (const auto& [k, v] : pairs)
        if (k != "preset") apply_key(cfg, k, v);
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config_text(os.str());
}

std::string echo_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::ostringstream os;
    os << "preset = " << cfg.preset << "\n";
    for (const auto& k : key_table()) os << k.name << " = " << k.get(copy) << "\n";
    return os.str();
}

void write_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write config echo: " + path);
    f << echo_config(cfg);
}

}  // namespace grounder
