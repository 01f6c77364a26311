// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "eoe/checkpoint.hpp"
#include "eoe/trainer.hpp"
#include "reference_trainer.hpp"
#include "test_support.hpp"

using namespace eoe;
using namespace eoe::testing;

namespace {

TrainConfig small_train(std::size_t steps) {
    TrainConfig tc;
    tc.total_steps = steps;
    tc.batches_per_expert = 3;
    tc.batch_size = 2;
    tc.seq_len = 8;
    tc.eval_every = 0;
    tc.seed = 5;
    tc.adamw.lr = 1e-3;
    return tc;
}

struct DeterministicScope {
    bool saved = deterministic_mode();
    DeterministicScope() { set_deterministic_mode(true); }
    ~DeterministicScope() { set_deterministic_mode(saved); }
};

}  // namespace

TEST_CASE("expert rotation") {
    const std::size_t want[] = {0, 0, 0, 1, 1, 1, 0, 0, 0, 1};
    for (std::size_t s = 0; s < 10; ++s) CHECK(expert_for_step(s, 3, 2) == want[s]);
    CHECK(expert_for_step(17, 1, 6) == 5);
}

TEST_CASE("metrics row format") {
    MetricsRecord r;
    r.step = 12;
    r.expert_id = 1;
    r.train_loss = 3.14159265;
    r.best_loss = 2.5;
    r.lr = 3e-4;
    r.copied = 7;
    CHECK(format_metrics_row(r) == "12,1,3.14159,2.5,0.0003,0,7,0");
}

TEST_CASE("zero steps returns initialized params and no snapshot") {
    const ModelConfig mc = tiny_config(2, 2, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    TrainConfig tc = small_train(0);
    const TrainResult r = train(mc, tc, shard);
    CHECK_FALSE(r.best);
    CHECK(r.metrics.empty());
    Rng init = Rng::for_stream(tc.seed, streams::kInit);
    const auto fresh = init_params<float>(mc, init);
    CHECK(bitwise_equal(r.params.blocks[1].fc_w, fresh.blocks[1].fc_w));
}

TEST_CASE("schedule recorded in metrics and best loss is monotone") {
    const ModelConfig mc = tiny_config(4, 2, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    const TrainResult r = train(mc, small_train(12), shard);
    REQUIRE(r.metrics.size() == 12);
    for (std::size_t s = 0; s < 12; ++s) {
        CHECK(r.metrics[s].expert_id == expert_for_step(s, 3, 2));
        if (s > 0) CHECK(r.metrics[s].best_loss <= r.metrics[s - 1].best_loss);
    }
    REQUIRE(r.best);
    CHECK(r.best->loss == r.metrics.back().best_loss);
}

TEST_CASE("evo disabled matches the plain reference loop bitwise") {
    DeterministicScope det;
    const TokenShard shard = text_shard(sample_text());
    for (std::size_t experts : {1u, 2u}) {
        const ModelConfig mc = tiny_config(2, experts, 256, 16, 2, 8);
        TrainConfig tc = small_train(20);
        tc.evo.enabled = false;
        tc.adamw.schedule = LrSchedule::warmup_cosine;
        tc.adamw.warmup_steps = 4;
        const auto dir = scratch_dir("trainer_killswitch");
        tc.metrics_path = dir / "m.csv";
        const TrainResult r = train(mc, tc, shard);
        const ReferenceRun ref = reference_train(mc, tc, shard);
        CHECK(read_file(tc.metrics_path) == ref.csv);
        const auto a = r.params.named();
        const auto b = ref.params.named();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(*a[i].tensor, *b[i].tensor));
    }
}

TEST_CASE("observer sees every step and the isolation contract holds") {
    const ModelConfig mc = tiny_config(3, 3, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    TrainConfig tc = small_train(15);
    tc.batches_per_expert = 2;
    tc.evo.r_c = 0.2;
    tc.evo.r_m = 0.05;
    Rng init = Rng::for_stream(tc.seed, streams::kInit);
    ParamStore<float> previous = init_params<float>(mc, init);
    std::size_t seen = 0, violations = 0;
    const TrainResult r = train(mc, tc, shard, nullptr, [&](const StepEvent& ev) {
        ++seen;
        for (std::size_t b = 0; b < 3; ++b) {
            if (b == ev.expert_id) continue;
            const auto before = previous.named();
            const auto after = ev.params.named();
            for (std::size_t i = 0; i < before.size(); ++i) {
                if (before[i].name.starts_with("blocks." + std::to_string(b) + ".") &&
                    !bitwise_equal(*before[i].tensor, *after[i].tensor)) {
                    ++violations;
                }
            }
        }
        previous = ev.params;
    });
    CHECK(seen == 15);
    CHECK(violations == 0);
    (void)r;
}

TEST_CASE("evaluate on a uniform model and determinism") {
    const ModelConfig mc = tiny_config(1, 1, 256, 16, 2, 8);
    const auto zero = zero_params<float>(mc);
    const TokenShard shard = text_shard(sample_text());
    Rng rng(1);
    CHECK(std::fabs(evaluate(zero, 0, shard, 3, 2, 8, rng) - std::log(256.0)) < 1e-5);

    Rng init(2);
    const auto p = init_params<float>(mc, init);
    Rng a(9), b(9);
    CHECK(evaluate(p, 0, shard, 4, 2, 8, a) == evaluate(p, 0, shard, 4, 2, 8, b));
    Rng c(9);
    CHECK_THROWS_AS(evaluate(p, 0, shard, 0, 2, 8, c), UsageError);
}

TEST_CASE("full-coverage evaluation equals the corpus average") {
    const ModelConfig mc = tiny_config(2, 1, 256, 16, 2, 8);
    Rng init(3);
    const auto p = init_params<float>(mc, init);
    const TokenShard shard = text_shard(sample_text().substr(0, 161));  // 20 windows of 8
    REQUIRE(window_capacity(shard, 8) == 20);

    double total = 0;
    for (std::size_t w = 0; w < 20; ++w) {
        const std::size_t start[] = {w * 8};
        const TokenBatch b = batch_from_windows(shard, start, 8);
        total += loss(forward(p, 0, b).logits, b);
    }
    Rng rng(4);
    CHECK(std::fabs(evaluate(p, 0, shard, 5, 4, 8, rng) - total / 20) < 1e-6);
}

TEST_CASE("checkpoint roundtrip") {
    DeterministicScope det;
    const ModelConfig mc = tiny_config(4, 2, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    const auto dir = scratch_dir("trainer_ckpt");
    TrainConfig tc = small_train(9);
    tc.checkpoint_path = dir / "best.ckpt";
    const TrainResult r = train(mc, tc, shard);
    REQUIRE(r.best);

    const LoadedCheckpoint ck = load_checkpoint(tc.checkpoint_path);
    CHECK(ck.config.n_layers_total == 2);
    CHECK(ck.config.n_experts == 1);
    CHECK(ck.meta.source_expert_id == r.best->source_expert_id);
    CHECK(ck.meta.best_loss == r.best->loss);
    CHECK(ck.meta.step == r.best->step_taken);
    const auto mem = materialize_best(r.params, *r.best);
    const auto a = mem.named();
    const auto b = ck.params.named();
    REQUIRE(a.size() == b.size());
    std::uint64_t scalars = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(bitwise_equal(*a[i].tensor, *b[i].tensor));
        scalars += b[i].tensor->size();
    }
    CHECK(scalars == count_params(mc, Scope::expert));
    CHECK(read_checkpoint_header(tc.checkpoint_path).scalar_count == scalars);

    Rng e1(7), e2(7);
    CHECK(evaluate(ck.params, 0, shard, 4, 2, 8, e1) == evaluate(mem, 0, shard, 4, 2, 8, e2));
}

TEST_CASE("checkpoint corruption") {
    const ModelConfig mc = tiny_config(2, 1, 64, 16, 2, 8);
    Rng init(1);
    auto params = init_params<float>(mc, init);
    auto views = make_experts(mc, params);
    const SnapshotPtr best = maybe_update_best(nullptr, views[0], 2.0, 4);
    const auto dir = scratch_dir("trainer_corrupt");
    save_best_checkpoint(params, *best, mc, dir / "ok.ckpt");
    const std::string bytes = read_file(dir / "ok.ckpt");

    write_file(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), LengthError);
    write_file(dir / "tiny.ckpt", bytes.substr(0, 6));
    CHECK_THROWS_AS(load_checkpoint(dir / "tiny.ckpt"), LengthError);
    write_file(dir / "extra.ckpt", bytes + std::string(8, '\0'));
    CHECK_THROWS_AS(load_checkpoint(dir / "extra.ckpt"), FormatError);
    std::string magic = bytes;
    magic[0] = 'X';
    write_file(dir / "magic.ckpt", magic);
    CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), FormatError);
    std::string version = bytes;
    version[4] = 9;
    write_file(dir / "version.ckpt", version);
    CHECK_THROWS_AS(load_checkpoint(dir / "version.ckpt"), FormatError);

    // header claims one block while the data holds two
    ModelConfig shallower = mc;
    shallower.n_layers_total = 1;
    auto prefix = encode_checkpoint_prefix(shallower, {});
    std::string forged(prefix.begin(), prefix.end());
    const std::size_t header_end = 12 + (static_cast<unsigned char>(bytes[8]) | static_cast<unsigned char>(bytes[9]) << 8);
    write_file(dir / "forged.ckpt", forged + bytes.substr(header_end));
    CHECK_THROWS_AS(load_checkpoint(dir / "forged.ckpt"), FormatError);

    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("invalid train config") {
    const ModelConfig mc = tiny_config(2, 1, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    TrainConfig tc = small_train(3);
    tc.seq_len = 9;
    CHECK_THROWS_AS(train(mc, tc, shard), UsageError);
    tc = small_train(3);
    tc.batches_per_expert = 0;
    CHECK_THROWS_AS(train(mc, tc, shard), UsageError);
    const ModelConfig narrow = tiny_config(2, 1, 64, 16, 2, 8);
    CHECK_THROWS_AS(train(narrow, small_train(3), shard), UsageError);
}

TEST_CASE("periodic evaluation of the best expert") {
    const ModelConfig mc = tiny_config(2, 2, 256, 16, 2, 8);
    const TokenShard shard = text_shard(sample_text());
    TrainConfig tc = small_train(10);
    tc.eval_every = 5;
    tc.eval_batches = 2;
    const TrainResult r = train(mc, tc, shard, &shard);
    REQUIRE(r.evals.size() == 2);
    CHECK(r.evals[0].step == 4);
    CHECK(r.evals[1].step == 9);
    CHECK(std::isfinite(r.evals[1].loss));
}
