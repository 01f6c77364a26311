// SPDX-License-Identifier: Apache-2.0
//
// Plain-text run configuration: one `key = value` per line, `#` starts a
// comment, keys are dotted (model.d_model, adamw.lr, evo.r_c, ...).
//
// Required: model.vocab_size, model.ctx_len, model.n_layers, model.n_experts,
// model.d_model, model.n_heads, train.data, train.checkpoint, train.metrics.
// Every other key defaults as listed by `eoe train --help-config`.
#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "eoe/errors.hpp"
#include "eoe/model.hpp"
#include "eoe/trainer.hpp"

namespace eoe {

// Parse failure; line is 0 for overrides and missing keys.
class ConfigError : public UsageError {
public:
    ConfigError(std::size_t line, const std::string& message);
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::filesystem::path data_path;
    std::filesystem::path val_data_path;  // optional
};

// Documented keys and defaults, one "key = default  # description" per line.
std::string run_config_reference();

// `overrides` are "key=value" strings applied after the file contents.
RunConfig parse_run_config(std::string_view text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace eoe
