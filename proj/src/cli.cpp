// SPDX-License-Identifier: Apache-2.0
#include "eoe/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>

#include "eoe/checkpoint.hpp"
#include "eoe/data.hpp"
#include "eoe/run_config.hpp"
#include "eoe/trainer.hpp"

namespace eoe {

namespace {

std::string format_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

int cmd_prepare(const std::string& input, const std::string& output, std::ostream& out) {
    std::ifstream in(input, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + input);
    }
    std::vector<TokenId> tokens;
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
        tokens.push_back(static_cast<unsigned char>(*it));
    }
    write_shard(tokens, 256, output);
    out << "wrote " << tokens.size() << " tokens (vocab 256) to " << output << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::size_t log_every,
              std::ostream& out) {
    const RunConfig cfg = load_run_config(config_path, overrides);
    const TokenShard train_shard = read_shard(cfg.data_path);
    std::optional<TokenShard> val_shard;
    if (!cfg.val_data_path.empty()) {
        val_shard = read_shard(cfg.val_data_path);
    }

    out << "model: " << cfg.model.n_layers_total << " layers, " << cfg.model.n_experts << " experts of "
        << cfg.model.layers_per_expert() << " layers, d_model " << cfg.model.d_model << "; params full "
        << count_params(cfg.model, Scope::full) << ", per expert " << count_params(cfg.model, Scope::expert) << "\n";

    StepObserver observer = [&](const StepEvent& ev) {
        if (log_every > 0 && ((ev.step + 1) % log_every == 0 || ev.step + 1 == cfg.train.total_steps)) {
            out << "step " << ev.step << " expert " << ev.expert_id << " loss " << format_g6(ev.record.train_loss)
                << " best " << format_g6(ev.record.best_loss) << " lr " << format_g6(ev.record.lr) << "\n";
        }
    };
    const TrainResult result =
        train(cfg.model, cfg.train, train_shard, val_shard ? &*val_shard : nullptr, observer);

    for (const EvalRecord& e : result.evals) {
        out << "eval step " << e.step << " best expert " << e.source_expert_id << " val loss " << format_g6(e.loss)
            << "\n";
    }
    if (result.best) {
        out << "final best loss " << format_g6(result.best->loss) << " (expert " << result.best->source_expert_id
            << ", step " << result.best->step_taken << "), checkpoint " << cfg.train.checkpoint_path.string()
            << "\n";
    } else {
        out << "no steps run; no checkpoint written\n";
    }
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& shard_path, std::size_t n_batches, std::uint64_t seed,
             std::size_t batch, std::size_t seq_len, std::ostream& out) {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const TokenShard shard = read_shard(shard_path);
    if (shard.vocab_size > ck.config.vocab_size) {
        throw UsageError("shard vocabulary (" + std::to_string(shard.vocab_size) + ") exceeds the model's (" +
                         std::to_string(ck.config.vocab_size) + ")");
    }
    if (seq_len == 0) {
        seq_len = ck.config.ctx_len;
    }
    if (seq_len > ck.config.ctx_len) {
        throw UsageError("sequence length exceeds the checkpoint's context length");
    }
    Rng rng = Rng::for_stream(seed, streams::kEval);
    out << format_g6(evaluate(ck.params, 0, shard, n_batches, batch, seq_len, rng)) << "\n";
    return kExitOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    char magic[4] = {};
    in.read(magic, 4);
    const std::string tag(magic, static_cast<std::size_t>(in.gcount()));
    in.close();

    if (tag == "EOET") {
        const ShardHeader h = read_shard_header(path);
        out << "format: token shard\n"
            << "version: " << h.version << "\n"
            << "vocab_size: " << h.vocab_size << "\n"
            << "token_count: " << h.token_count << "\n"
            << "token_width: " << (h.vocab_size > 65535 ? 4 : 2) << " bytes\n";
        return kExitOk;
    }
    if (tag == "EOEC") {
        const CheckpointHeader h = read_checkpoint_header(path);
        out << "format: best-expert checkpoint\n"
            << "version: " << kCheckpointVersion << "\n"
            << "vocab_size: " << h.config.vocab_size << "\n"
            << "ctx_len: " << h.config.ctx_len << "\n"
            << "n_layers: " << h.config.n_layers_total << "\n"
            << "d_model: " << h.config.d_model << "\n"
            << "n_heads: " << h.config.n_heads << "\n"
            << "d_ff: " << h.config.ffn_dim() << "\n"
            << "tie_head: " << (h.config.tie_head ? "true" : "false") << "\n"
            << "source_expert_id: " << h.meta.source_expert_id << "\n"
            << "best_loss: " << format_g6(h.meta.best_loss) << "\n"
            << "step: " << h.meta.step << "\n"
            << "tensors:\n";
        for (const TensorInfo& t : tensor_inventory(h.config)) {
            out << "  " << t.name << " " << shape_to_string(t.shape) << "\n";
        }
        out << "total_scalars: " << h.scalar_count << "\n"
            << "expert_params: " << count_params(h.config, Scope::expert) << " ("
            << format_g6(static_cast<double>(count_params(h.config, Scope::expert)) / 1e6) << "M)\n";
        return kExitOk;
    }
    throw FormatError(path + ": unrecognized file (expected an EOET shard or EOEC checkpoint)");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Evolutionary training of transformer experts", args.empty() ? "eoe" : args.front()};
    app.require_subcommand(1);

    std::string prep_in;
    std::string prep_out;
    auto* prepare = app.add_subcommand("prepare", "byte-tokenize a text file into a shard");
    prepare->add_option("input", prep_in, "input text file")->required();
    prepare->add_option("output", prep_out, "output shard")->required();

    std::string train_config;
    std::vector<std::string> overrides;
    std::size_t log_every = 100;
    bool help_config = false;
    auto* train_cmd = app.add_subcommand("train", "train from a run config file");
    train_cmd->add_option("config", train_config, "run config (key = value lines)");
    train_cmd->add_option("--set", overrides, "override a config key, e.g. --set evo.enabled=false");
    train_cmd->add_option("--log-every", log_every, "progress line interval in steps, 0 = quiet");
    train_cmd->add_flag("--help-config", help_config, "list config keys and defaults");

    std::string eval_ckpt;
    std::string eval_shard;
    std::size_t eval_batches = 4;
    std::uint64_t eval_seed = 0;
    std::size_t eval_batch_size = 4;
    std::size_t eval_seq_len = 0;
    auto* eval_cmd = app.add_subcommand("eval", "mean loss of a checkpoint on a shard");
    eval_cmd->add_option("checkpoint", eval_ckpt, "best-expert checkpoint")->required();
    eval_cmd->add_option("shard", eval_shard, "token shard")->required();
    eval_cmd->add_option("--batches", eval_batches, "number of batches");
    eval_cmd->add_option("--seed", eval_seed, "window sampling seed");
    eval_cmd->add_option("--batch-size", eval_batch_size, "sequences per batch");
    eval_cmd->add_option("--seq-len", eval_seq_len, "tokens per sequence, 0 = checkpoint ctx_len");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "describe a shard or checkpoint");
    inspect->add_option("path", inspect_path, "file to inspect")->required();

    try {
        std::vector<std::string> rest(args.rbegin(), args.rend());
        if (!rest.empty()) {
            rest.pop_back();  // program name
        }
        app.parse(rest);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*prepare) {
            return cmd_prepare(prep_in, prep_out, out);
        }
        if (*train_cmd) {
            if (help_config) {
                out << run_config_reference();
                return kExitOk;
            }
            if (train_config.empty()) {
                err << "error: train needs a config file\n";
                return kExitUsage;
            }
            return cmd_train(train_config, overrides, log_every, out);
        }
        if (*eval_cmd) {
            return cmd_eval(eval_ckpt, eval_shard, eval_batches, eval_seed, eval_batch_size, eval_seq_len, out);
        }
        if (*inspect) {
            return cmd_inspect(inspect_path, out);
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CapacityError& e) {
        err << "capacity error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace eoe
