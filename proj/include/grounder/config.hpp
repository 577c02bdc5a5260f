#pragma once

#include <string>

#include "grounder/data.hpp"
#include "grounder/engine.hpp"
#include "grounder/model.hpp"

namespace grounder {

// One run's full configuration: model, training protocol, generator, split
// and paths. Presets populate defaults; individual keys override them.
struct RunConfig {
    std::string preset = "toy";  // "toy" or "paper" (alias "full")
    ModelConfig model = ModelConfig::toy();
    TrainConfig train;
    SyntheticConfig synth;
    SplitSpec split;
    std::string dataset_dir = "data/synthetic";
    std::string out_dir = "runs/out";

    void validate() const;
};

// Returns the preset's fully populated config, or throws ConfigError for an
// unknown name.
RunConfig preset_config(const std::string& name);

// Applies one "section.key" assignment; unknown keys and unparseable values
// throw ConfigError naming the key.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat `key = value` text, one per line, '#' starts a comment. A "preset"
// line is applied first regardless of position; remaining keys in order.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Serializes every effective key in the same format parse_config_text reads,
// so a run is reproducible from its echo alone.
std::string echo_config(const RunConfig& cfg);
void write_config(const RunConfig& cfg, const std::string& path);

}  // namespace grounder
