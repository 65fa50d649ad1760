#pragma once

// Everything a command needs beyond the model: optimiser, data source, output
// location and dump switches, loaded from a key = value file.

#include <filesystem>
#include <map>
#include <string>

#include "crobim/train.hpp"

namespace crobim {

struct RunConfig {
    ModelConfig model;
    train::OptimConfig optim;
    std::string manifest;             // empty: synthetic data
    std::size_t synth_count = 8;
    std::uint64_t synth_seed = 1234;
    std::filesystem::path output_dir = "runs/default";
    bool dump_attention = false;
    std::size_t eval_shards = 1;

    /// Desk defaults (lr 1e-3, 500 steps, batch 4).
    static RunConfig desk();
    /// Published optimiser settings and model widths.
    static RunConfig paper_scale();

    /// Applies run keys and forwards the rest to ModelConfig::apply.
    /// "preset = desk|paper" resets everything first and must come alone or first.
    void apply(const std::map<std::string, std::string>& kv);
    void validate() const;
    std::map<std::string, std::string> to_map() const;
};

/// Parses "key = value" lines; '#' starts a comment. Repeated keys raise ConfigError.
std::map<std::string, std::string> parse_key_values(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

}  // namespace crobim
