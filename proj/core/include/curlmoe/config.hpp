#pragma once

// Run configuration shared by the library drivers and the CLI.
//
// File format: one `key = value` per line, `#` starts a comment, `[section]`
// headers select one of data, tokenizer, moe, train. Unknown sections or keys
// are errors.

#include <cstdint>
#include <filesystem>
#include <string>

#include "curlmoe/dataset.hpp"
#include "curlmoe/moe.hpp"
#include "curlmoe/tokenizer.hpp"

namespace curlmoe {

struct PhaseConfig {
    int steps = 0;
    int batch = 8;
    double lr = 1e-3;
    int eval_interval = 100;

    void validate(const char* phase) const;
};

struct TrainConfig {
    PhaseConfig tokenizer{2000, 8, 1e-3, 100};
    PhaseConfig moe{5000, 8, 1e-3, 100};
    std::uint64_t seed = 0;

    void validate() const;
};

struct RunConfig {
    synth::DataConfig data;
    tokenizer::TokenizerConfig tokenizer;
    moe::MoEConfig moe;
    TrainConfig train;

    /// Applies one `section.key = value` assignment.
    void set(const std::string& section, const std::string& key, const std::string& value);
    /// Reads a config file on top of the current values.
    void load(const std::filesystem::path& path);
    /// Parses the config-file text on top of the current values. `origin` names the source in errors.
    void parse(const std::string& text, const std::string& origin = "<config>");

    /// Copies shared sizes (grid, channels, patch, seed) between sections and validates everything.
    void resolve();

    /// Config-file text that reproduces this configuration.
    std::string dump() const;
};

}  // namespace curlmoe
