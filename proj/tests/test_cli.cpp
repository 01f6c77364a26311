// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "eoe/checkpoint.hpp"
#include "eoe/cli.hpp"
#include "eoe/data.hpp"
#include "test_support.hpp"

using namespace eoe;
using namespace eoe::testing;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(std::vector<std::string> args) {
    args.insert(args.begin(), "eoe");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string tiny_run_config(const std::filesystem::path& dir, std::size_t steps) {
    return "model.vocab_size = 256\nmodel.ctx_len = 8\nmodel.n_layers = 2\nmodel.n_experts = 2\n"
           "model.d_model = 16\nmodel.n_heads = 2\n"
           "train.data = " + (dir / "corpus.bin").string() + "\n"
           "train.checkpoint = best.ckpt\ntrain.metrics = metrics.csv\n"
           "train.total_steps = " + std::to_string(steps) + "\ntrain.batches_per_expert = 2\n"
           "train.batch_size = 2\ntrain.eval_every = 0\n";
}

}  // namespace

TEST_CASE("usage errors exit 2") {
    CHECK(run({}).code == kExitUsage);
    CHECK(run({"frobnicate"}).code == kExitUsage);
    CHECK(run({"eval", "only-one"}).code == kExitUsage);
    CHECK(run({"train"}).code == kExitUsage);
    CHECK(run({"--help"}).code == kExitOk);
    const Outcome ref = run({"train", "--help-config"});
    CHECK(ref.code == kExitOk);
    CHECK(ref.out.find("evo.r_c") != std::string::npos);
}

TEST_CASE("prepare writes byte tokens") {
    const auto dir = scratch_dir("cli_prepare");
    write_file(dir / "abc.txt", "abc");
    CHECK(run({"prepare", (dir / "abc.txt").string(), (dir / "abc.bin").string()}).code == kExitOk);
    const TokenShard s = read_shard(dir / "abc.bin");
    CHECK(s.vocab_size == 256);
    CHECK(s.tokens == std::vector<TokenId>{97, 98, 99});

    write_file(dir / "empty.txt", "");
    CHECK(run({"prepare", (dir / "empty.txt").string(), (dir / "empty.bin").string()}).code == kExitOk);
    CHECK(read_shard(dir / "empty.bin").tokens.empty());

    std::string all;
    for (int i = 0; i < 256; ++i) all.push_back(static_cast<char>(i));
    write_file(dir / "all.txt", all + sample_text());
    CHECK(run({"prepare", (dir / "all.txt").string(), (dir / "all.bin").string()}).code == kExitOk);
    const TokenShard round = read_shard(dir / "all.bin");
    std::string back;
    for (TokenId t : round.tokens) back.push_back(static_cast<char>(t));
    CHECK(back == all + sample_text());

    CHECK(run({"prepare", (dir / "nope.txt").string(), (dir / "x.bin").string()}).code == kExitFailure);
}

TEST_CASE("train, eval and inspect on a tiny run") {
    const auto dir = scratch_dir("cli_train");
    write_file(dir / "corpus.txt", sample_text());
    REQUIRE(run({"prepare", (dir / "corpus.txt").string(), (dir / "corpus.bin").string()}).code == kExitOk);
    write_file(dir / "run.cfg", tiny_run_config(dir, 6));

    const Outcome t = run({"train", (dir / "run.cfg").string(), "--log-every", "2"});
    REQUIRE(t.code == kExitOk);
    CHECK(t.out.find("final best loss") != std::string::npos);
    const std::string csv = read_file(dir / "metrics.csv");
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 7);

    const std::string ckpt = (dir / "best.ckpt").string();
    const std::string shard = (dir / "corpus.bin").string();
    const Outcome e1 = run({"eval", ckpt, shard, "--batches", "3", "--seed", "4", "--batch-size", "2"});
    const Outcome e2 = run({"eval", ckpt, shard, "--batches", "3", "--seed", "4", "--batch-size", "2"});
    REQUIRE(e1.code == kExitOk);
    CHECK(e1.out == e2.out);
    const Outcome big = run({"eval", ckpt, shard, "--batches", "1000"});
    CHECK(big.code == kExitUsage);
    CHECK(big.err.find("capacity") != std::string::npos);

    const Outcome ic = run({"inspect", ckpt});
    REQUIRE(ic.code == kExitOk);
    CHECK(ic.out.find("n_layers: 1") != std::string::npos);
    CHECK(ic.out.find("blocks.0.mlp.fc.w [64x16]") != std::string::npos);
    const std::string scalars = std::to_string(count_params(tiny_config(2, 2, 256, 16, 2, 8), Scope::expert));
    CHECK(ic.out.find("total_scalars: " + scalars) != std::string::npos);

    const Outcome over = run({"train", (dir / "run.cfg").string(), "--set", "model.d_model=15", "--log-every", "0"});
    CHECK(over.code == kExitUsage);
}

TEST_CASE("train reports config problems with exit 2") {
    const auto dir = scratch_dir("cli_config");
    std::string cfg = tiny_run_config(dir, 3);
    cfg.replace(cfg.find("model.d_model = 16\n"), 19, "");
    write_file(dir / "run.cfg", cfg);
    const Outcome o = run({"train", (dir / "run.cfg").string()});
    CHECK(o.code == kExitUsage);
    CHECK(o.err.find("model.d_model") != std::string::npos);

    write_file(dir / "run2.cfg", tiny_run_config(dir, 3));  // corpus.bin absent
    CHECK(run({"train", (dir / "run2.cfg").string()}).code == kExitFailure);
}

TEST_CASE("train is reproducible") {
    const auto dir = scratch_dir("cli_repro");
    write_file(dir / "corpus.txt", sample_text());
    REQUIRE(run({"prepare", (dir / "corpus.txt").string(), (dir / "corpus.bin").string()}).code == kExitOk);
    write_file(dir / "run.cfg", tiny_run_config(dir, 5));
    const bool saved = deterministic_mode();
    set_deterministic_mode(true);
    REQUIRE(run({"train", (dir / "run.cfg").string(), "--log-every", "0"}).code == kExitOk);
    const std::string c1 = read_file(dir / "best.ckpt");
    const std::string m1 = read_file(dir / "metrics.csv");
    REQUIRE(run({"train", (dir / "run.cfg").string(), "--log-every", "0"}).code == kExitOk);
    set_deterministic_mode(saved);
    CHECK(read_file(dir / "best.ckpt") == c1);
    CHECK(read_file(dir / "metrics.csv") == m1);
}

TEST_CASE("eval of a uniform checkpoint prints ln(vocab)") {
    const auto dir = scratch_dir("cli_uniform");
    const ModelConfig mc = tiny_config(1, 1, 256, 16, 2, 8);
    auto params = zero_params<float>(mc);
    auto views = make_experts(mc, params);
    const SnapshotPtr best = maybe_update_best(nullptr, views[0], 5.5, 0);
    save_best_checkpoint(params, *best, mc, dir / "zero.ckpt");
    write_shard(text_shard(sample_text()).tokens, 256, dir / "c.bin");
    const Outcome o = run({"eval", (dir / "zero.ckpt").string(), (dir / "c.bin").string()});
    REQUIRE(o.code == kExitOk);
    char want[32];
    std::snprintf(want, sizeof(want), "%.6g\n", std::log(256.0));
    CHECK(o.out == want);
}

TEST_CASE("inspect shards, garbage and a full-size expert header") {
    const auto dir = scratch_dir("cli_inspect");
    std::vector<TokenId> tokens(100, 7);
    write_shard(tokens, 256, dir / "s.bin");
    const Outcome s = run({"inspect", (dir / "s.bin").string()});
    CHECK(s.code == kExitOk);
    CHECK(s.out.find("token_count: 100") != std::string::npos);

    write_file(dir / "junk.bin", "not a model at all");
    CHECK(run({"inspect", (dir / "junk.bin").string()}).code == kExitUsage);
    CHECK(run({"inspect", (dir / "absent.bin").string()}).code == kExitFailure);

    // Header for one 8-block expert of the 48-layer model; tensor bytes are a
    // sparse hole since inspect never reads them.
    ModelConfig xl = gpt2_config(8, 1, 1600, 25);
    const auto prefix = encode_checkpoint_prefix(xl, {3, 2.75, 100});
    write_file(dir / "xl.ckpt", std::string(prefix.begin(), prefix.end()));
    const std::uint64_t scalars = count_params(xl, Scope::full);
    std::filesystem::resize_file(dir / "xl.ckpt", prefix.size() + scalars * 4);
    const Outcome x = run({"inspect", (dir / "xl.ckpt").string()});
    REQUIRE(x.code == kExitOk);
    const auto pos = x.out.find("total_scalars: ");
    REQUIRE(pos != std::string::npos);
    const double total = std::stod(x.out.substr(pos + 15));
    CHECK(std::fabs(total - 328.6e6) / 328.6e6 < 0.01);
    std::filesystem::remove(dir / "xl.ckpt");
}
