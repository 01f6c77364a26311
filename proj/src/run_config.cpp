// SPDX-License-Identifier: Apache-2.0
#include "eoe/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace eoe {

ConfigError::ConfigError(std::size_t line, const std::string& message)
    : UsageError(line == 0 ? message : "line " + std::to_string(line) + ": " + message), line_(line) {}

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

template <class N>
N parse_number(const std::string& key, const std::string& value, std::size_t line) {
    N out{};
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError(line, "'" + key + "' expects a number, got '" + value + "'");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& value, std::size_t line) {
    std::istringstream in(value);
    in.imbue(std::locale::classic());
    double out = 0.0;
    in >> out;
    if (in.fail() || !in.eof()) {
        throw ConfigError(line, "'" + key + "' expects a real number, got '" + value + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value, std::size_t line) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    throw ConfigError(line, "'" + key + "' expects true or false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value, std::size_t line)>;

struct KeySpec {
    std::string default_value;  // empty: required
    std::string description;
    Setter apply;
};

const std::vector<std::pair<std::string, KeySpec>>& key_table() {
    static const std::vector<std::pair<std::string, KeySpec>> table = [] {
        std::vector<std::pair<std::string, KeySpec>> t;
        auto add = [&t](std::string key, std::string def, std::string desc, Setter s) {
            t.push_back({std::move(key), KeySpec{std::move(def), std::move(desc), std::move(s)}});
        };
#define EOE_SIZE(FIELD)                                                                    \
    [](RunConfig& c, const std::string& k, const std::string& v, std::size_t line) { \
        c.FIELD = parse_number<std::size_t>(k, v, line);                             \
    }
#define EOE_REAL(FIELD) \
    [](RunConfig& c, const std::string& k, const std::string& v, std::size_t line) { c.FIELD = parse_real(k, v, line); }
#define EOE_BOOL(FIELD) \
    [](RunConfig& c, const std::string& k, const std::string& v, std::size_t line) { c.FIELD = parse_bool(k, v, line); }
#define EOE_PATH(FIELD) [](RunConfig& c, const std::string&, const std::string& v, std::size_t) { c.FIELD = v; }

        add("model.vocab_size", "", "vocabulary size (256 for byte-level shards)", EOE_SIZE(model.vocab_size));
        add("model.ctx_len", "", "maximum sequence length", EOE_SIZE(model.ctx_len));
        add("model.n_layers", "", "blocks in the full model", EOE_SIZE(model.n_layers_total));
        add("model.n_experts", "", "number of experts; must divide model.n_layers", EOE_SIZE(model.n_experts));
        add("model.d_model", "", "embedding width", EOE_SIZE(model.d_model));
        add("model.n_heads", "", "attention heads; must divide model.d_model", EOE_SIZE(model.n_heads));
        add("model.d_ff", "0", "MLP hidden width, 0 = 4 * d_model", EOE_SIZE(model.d_ff));
        add("model.tie_head", "true", "share the output head with the token embedding", EOE_BOOL(model.tie_head));

        add("train.data", "", "training shard", EOE_PATH(data_path));
        add("train.val_data", "-", "validation shard, - for none", [](RunConfig& c, const std::string&, const std::string& v, std::size_t) {
            c.val_data_path = v == "-" ? std::filesystem::path() : std::filesystem::path(v);
        });
        add("train.checkpoint", "", "best-expert checkpoint output", EOE_PATH(train.checkpoint_path));
        add("train.metrics", "", "metrics CSV output", EOE_PATH(train.metrics_path));
        add("train.total_steps", "1000", "optimizer steps", EOE_SIZE(train.total_steps));
        add("train.batches_per_expert", "32", "consecutive batches per expert before rotating",
            EOE_SIZE(train.batches_per_expert));
        add("train.batch_size", "4", "sequences per batch", EOE_SIZE(train.batch_size));
        add("train.seq_len", "0", "tokens per sequence, 0 = model.ctx_len", EOE_SIZE(train.seq_len));
        add("train.eval_every", "100", "steps between validation evaluations, 0 = never", EOE_SIZE(train.eval_every));
        add("train.eval_batches", "4", "batches per validation evaluation", EOE_SIZE(train.eval_batches));
        add("train.seed", "1337", "run seed", [](RunConfig& c, const std::string&, const std::string& v, std::size_t line) {
            c.train.seed = parse_number<std::uint64_t>("train.seed", v, line);
        });
        add("train.sampling", "random", "random | sequential", [](RunConfig& c, const std::string&, const std::string& v, std::size_t line) {
            if (v == "random") {
                c.train.sampling = SamplingMode::random;
            } else if (v == "sequential") {
                c.train.sampling = SamplingMode::sequential;
            } else {
                throw ConfigError(line, "train.sampling must be random or sequential, got '" + v + "'");
            }
        });
        add("train.disjoint_streams", "false", "give every expert its own data stream",
            EOE_BOOL(train.disjoint_streams));

        add("adamw.lr", "0.0003", "peak learning rate", EOE_REAL(train.adamw.lr));
        add("adamw.beta1", "0.9", "first-moment decay", EOE_REAL(train.adamw.beta1));
        add("adamw.beta2", "0.999", "second-moment decay", EOE_REAL(train.adamw.beta2));
        add("adamw.eps", "1e-08", "denominator epsilon", EOE_REAL(train.adamw.eps));
        add("adamw.weight_decay", "0.01", "decoupled weight decay", EOE_REAL(train.adamw.weight_decay));
        add("adamw.schedule", "constant", "constant | cosine", [](RunConfig& c, const std::string&, const std::string& v, std::size_t line) {
            if (v == "constant") {
                c.train.adamw.schedule = LrSchedule::constant;
            } else if (v == "cosine") {
                c.train.adamw.schedule = LrSchedule::warmup_cosine;
            } else {
                throw ConfigError(line, "adamw.schedule must be constant or cosine, got '" + v + "'");
            }
        });
        add("adamw.warmup_steps", "0", "linear warmup steps (cosine schedule)", EOE_SIZE(train.adamw.warmup_steps));
        add("adamw.min_lr_fraction", "0.1", "final lr as a fraction of adamw.lr (cosine schedule)",
            EOE_REAL(train.adamw.min_lr_fraction));
        add("adamw.max_grad_norm", "0", "global gradient-norm clip, 0 = off", EOE_REAL(train.adamw.max_grad_norm));

        add("evo.enabled", "true", "apply evolutionary operators after each AdamW step", EOE_BOOL(train.evo.enabled));
        add("evo.r_social", "0.1", "PSO social coefficient", EOE_REAL(train.evo.r_social));
        add("evo.r_c", "0.01", "crossover ratio", EOE_REAL(train.evo.r_c));
        add("evo.r_m", "0.001", "mutation ratio", EOE_REAL(train.evo.r_m));
        add("evo.mutation_scale", "1", "mutation variance = scale * v_hat", EOE_REAL(train.evo.mutation_scale));
        add("evo.order", "pso,crossover,mutation", "comma-separated operator order",
            [](RunConfig& c, const std::string&, const std::string& v, std::size_t line) {
                c.train.evo.order.clear();
                std::istringstream in(v);
                std::string item;
                while (std::getline(in, item, ',')) {
                    try {
                        c.train.evo.order.push_back(parse_evo_operator(trim(item)));
                    } catch (const UsageError& e) {
                        throw ConfigError(line, e.what());
                    }
                }
            });
#undef EOE_SIZE
#undef EOE_REAL
#undef EOE_BOOL
#undef EOE_PATH
        return t;
    }();
    return table;
}

const KeySpec* find_key(const std::string& key) {
    for (const auto& [name, spec] : key_table()) {
        if (name == key) {
            return &spec;
        }
    }
    return nullptr;
}

}  // namespace

std::string run_config_reference() {
    std::string out;
    for (const auto& [name, spec] : key_table()) {
        out += name + " = " + (spec.default_value.empty() ? "<required>" : spec.default_value) + "  # " +
               spec.description + "\n";
    }
    return out;
}

RunConfig parse_run_config(std::string_view text, const std::vector<std::string>& overrides) {
    // key -> (value, line)
    std::map<std::string, std::pair<std::string, std::size_t>> values;
    auto take = [&](const std::string& raw, std::size_t line) {
        const auto eq = raw.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(line, "expected 'key = value', got '" + trim(raw) + "'");
        }
        std::string key = trim(std::string_view(raw).substr(0, eq));
        std::string value = trim(std::string_view(raw).substr(eq + 1));
        if (find_key(key) == nullptr) {
            throw ConfigError(line, "unknown key '" + key + "'");
        }
        if (value.empty()) {
            throw ConfigError(line, "empty value for '" + key + "'");
        }
        values[key] = {value, line};
    };

    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        if (trim(line).empty()) {
            continue;
        }
        take(line, line_no);
    }
    for (const auto& o : overrides) {
        take(o, 0);
    }

    RunConfig cfg;
    for (const auto& [name, spec] : key_table()) {
        auto it = values.find(name);
        if (it == values.end()) {
            if (spec.default_value.empty()) {
                throw ConfigError(0, "missing required key '" + name + "'");
            }
            spec.apply(cfg, name, spec.default_value, 0);
        } else {
            spec.apply(cfg, name, it->second.first, it->second.second);
        }
    }
    if (cfg.train.seq_len == 0) {
        cfg.train.seq_len = cfg.model.ctx_len;
    }
    try {
        cfg.model.validate();
        cfg.train.validate(cfg.model);
    } catch (const UsageError& e) {
        throw ConfigError(0, e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(0, "cannot open config file " + path.string());
    }
    std::ostringstream text;
    text << in.rdbuf();
    RunConfig cfg = parse_run_config(text.str(), overrides);
    // Relative data paths resolve against the config file's directory.
    const auto base = path.parent_path();
    auto resolve = [&](std::filesystem::path& p) {
        if (!p.empty() && p.is_relative()) {
            p = base / p;
        }
    };
    resolve(cfg.data_path);
    resolve(cfg.val_data_path);
    resolve(cfg.train.checkpoint_path);
    resolve(cfg.train.metrics_path);
    return cfg;
}

}  // namespace eoe
