#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "di2w/synth_world.hpp"
#include "di2w/trainer.hpp"

#include <filesystem>

using namespace di2w;

namespace {

WorldConfig small_world_config(std::uint64_t seed = 5) {
    WorldConfig cfg;
    cfg.concept_count = 24;
    cfg.style_count = 3;
    cfg.image_count = 300;
    cfg.d = 16;
    cfg.seed = seed;
    cfg.sigma = 0.01;  // keeps crop embeddings away from exact zero
    return cfg;
}

TrainConfig small_train_config() {
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.total_steps = 60;
    cfg.warmup_steps = 20;
    cfg.learning_rate = 1e-2;
    cfg.tau = 10.0;
    cfg.seed = 42;
    return cfg;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("learning rate warms up linearly then stays constant") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-5;
    cfg.warmup_steps = 10000;
    CHECK(lr_at_step(0, cfg) == 0.0);
    CHECK(lr_at_step(10000, cfg) == 1e-5);
    CHECK(lr_at_step(5000, cfg) == doctest::Approx(5e-6).epsilon(1e-15));
    CHECK(lr_at_step(20000, cfg) == 1e-5);
    double prev = -1.0;
    for (long s = 0; s <= 10000; s += 100) {
        const double lr = lr_at_step(s, cfg);
        CHECK(lr >= prev);
        prev = lr;
    }
}

TEST_CASE("first optimizer step matches the closed form") {
    MappingDims dims{1, 1, 1};
    MappingParams params(dims, Activation::Tanh,
                         VectorXd::Ones(MappingParams::parameter_count(dims)));
    OptimizerState state = OptimizerState::zeros_like(params);
    VectorXd grads = VectorXd::Zero(params.theta().size());
    grads(0) = 2.0;
    adamw_step(params, grads, state, 0.1, 0.0);
    const double expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8));
    CHECK(params.theta()(0) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(params.theta()(0) == doctest::Approx(0.9).epsilon(1e-7));
    // Zero-gradient coordinates are untouched when decay is off.
    CHECK(params.theta()(1) == 1.0);
    CHECK(state.step == 1);
}

TEST_CASE("zero gradient with weight decay shrinks parameters multiplicatively") {
    MappingDims dims{1, 1, 1};
    MappingParams params(dims, Activation::Tanh,
                         VectorXd::Ones(MappingParams::parameter_count(dims)));
    OptimizerState state = OptimizerState::zeros_like(params);
    adamw_step(params, VectorXd::Zero(params.theta().size()), state, 0.1, 0.1);
    for (Index i = 0; i < params.theta().size(); ++i)
        CHECK(params.theta()(i) == doctest::Approx(0.99).epsilon(1e-15));
}

TEST_CASE("bad gradients and shapes abort the update") {
    MappingParams params = init_mapping({4, 4, 4}, 1);
    OptimizerState state = OptimizerState::zeros_like(params);
    VectorXd nan_grads = VectorXd::Zero(params.theta().size());
    nan_grads(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adamw_step(params, nan_grads, state, 0.1, 0.0),
                         doctest::Contains("non-finite-gradient"), Error);
    CHECK_THROWS_WITH_AS(adamw_step(params, VectorXd::Zero(3), state, 0.1, 0.0),
                         doctest::Contains("shape-mismatch"), Error);
}

TEST_CASE("optimizer trajectories are deterministic") {
    auto run = [] {
        MappingParams params = init_mapping({6, 6, 6}, 11);
        OptimizerState state = OptimizerState::zeros_like(params);
        Rng rng(13);
        for (int s = 0; s < 25; ++s) {
            const VectorXd grads = rng.normal_vector(params.theta().size());
            adamw_step(params, grads, state, 1e-3, 0.1);
        }
        return params.hash();
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoints round-trip exactly and reject corruption") {
    MappingParams params = init_mapping({5, 5, 5}, 3);
    OptimizerState state = OptimizerState::zeros_like(params);
    Rng rng(17);
    adamw_step(params, rng.normal_vector(params.theta().size()), state, 1e-3, 0.1);

    const auto path = temp_path("di2w_test.ckpt");
    write_checkpoint(path, params, state);
    const Checkpoint back = read_checkpoint(path);
    CHECK(back.params.theta() == params.theta());
    CHECK(back.opt.m == state.m);
    CHECK(back.opt.v == state.v);
    CHECK(back.opt.step == state.step);

    std::ofstream bad(path, std::ios::binary | std::ios::trunc);
    bad << "XXXX junk";
    bad.close();
    CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("bad-magic"), Error);
}

TEST_CASE("zero total steps returns the initial parameters unchanged") {
    const SynthWorld world = generate_world(small_world_config());
    TrainConfig cfg = small_train_config();
    cfg.total_steps = 0;
    MappingParams init = init_mapping({16, 16, 16}, cfg.seed);
    const auto before = init.hash();
    const TrainResult result =
        train(world.store, world.vocab, world.text_params, cfg, std::move(init));
    CHECK(result.params.hash() == before);
    CHECK(result.steps_applied == 0);
    CHECK(result.log_lines.empty());
}

TEST_CASE("training reduces the loss on the synthetic world") {
    const SynthWorld world = generate_world(small_world_config());
    TrainConfig cfg = small_train_config();
    cfg.total_steps = 120;
    MappingParams init = init_mapping({16, 16, 16}, cfg.seed);
    const TrainResult result =
        train(world.store, world.vocab, world.text_params, cfg, std::move(init));
    CHECK(result.steps_applied > 0);
    CHECK(result.last_loss < result.first_loss);
}

TEST_CASE("two identical runs produce bitwise-identical parameters and logs") {
    const SynthWorld world = generate_world(small_world_config());
    const TrainConfig cfg = small_train_config();
    auto run = [&] {
        return train(world.store, world.vocab, world.text_params, cfg,
                     init_mapping({16, 16, 16}, cfg.seed));
    };
    const TrainResult a = run();
    const TrainResult b = run();
    CHECK(a.params.theta() == b.params.theta());
    CHECK(a.opt.m == b.opt.m);
    CHECK(a.log_lines == b.log_lines);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted trajectory") {
    const SynthWorld world = generate_world(small_world_config());
    TrainConfig cfg = small_train_config();
    cfg.total_steps = 40;

    const TrainResult full = train(world.store, world.vocab, world.text_params, cfg,
                                   init_mapping({16, 16, 16}, cfg.seed));

    TrainConfig half = cfg;
    half.total_steps = 20;
    const TrainResult first = train(world.store, world.vocab, world.text_params, half,
                                    init_mapping({16, 16, 16}, cfg.seed));
    const auto path = temp_path("di2w_resume.ckpt");
    write_checkpoint(path, first.params, first.opt);
    const Checkpoint restored = read_checkpoint(path);
    const TrainResult second = train(world.store, world.vocab, world.text_params, cfg,
                                     restored.params, restored.opt, /*start_step=*/20);

    CHECK(second.params.theta() == full.params.theta());
    CHECK(second.opt.m == full.opt.m);
    CHECK(second.opt.v == full.opt.v);
}

TEST_CASE("training leaves the frozen encoders and vocabulary unchanged") {
    const SynthWorld world = generate_world(small_world_config());
    const std::uint64_t vocab_hash = world.vocab.hash();
    const std::uint64_t text_hash = world.text_params.hash();
    const std::uint64_t image_hash = world.image_params.hash();
    TrainConfig cfg = small_train_config();
    cfg.total_steps = 30;
    MappingParams init = init_mapping({16, 16, 16}, cfg.seed);
    const auto init_hash = init.hash();
    const TrainResult result =
        train(world.store, world.vocab, world.text_params, cfg, std::move(init));
    CHECK(world.vocab.hash() == vocab_hash);
    CHECK(world.text_params.hash() == text_hash);
    CHECK(world.image_params.hash() == image_hash);
    CHECK(result.params.hash() != init_hash);  // only the mapper moved
}

TEST_CASE("stores smaller than one batch are rejected") {
    const SynthWorld world = generate_world(small_world_config());
    TrainConfig cfg = small_train_config();
    cfg.batch_size = 1024;
    CHECK_THROWS_WITH_AS(train(world.store, world.vocab, world.text_params, cfg,
                               init_mapping({16, 16, 16}, 1)),
                         doctest::Contains("store-too-small"), Error);

    StoreRecords empty;
    empty.d = 16;
    CHECK_THROWS_WITH_AS(
        train(empty, world.vocab, world.text_params, small_train_config(),
              init_mapping({16, 16, 16}, 1)),
        doctest::Contains("empty-store"), Error);
}

TEST_CASE("persistently filtered batches abort with a diagnostic") {
    // Identical captions and identical crops make the strict-inequality
    // filter reject every sample in every batch.
    SynthWorld world = generate_world(small_world_config());
    StoreRecords store = world.store;
    const VectorXf cap = store.captions.front().sentence_embedding;
    const VectorXf crop = store.images.front().crop_candidates.front().second;
    for (auto& c : store.captions) c.sentence_embedding = cap;
    for (auto& img : store.images)
        for (auto& cand : img.crop_candidates) cand.second = crop;

    TrainConfig cfg = small_train_config();
    cfg.max_consecutive_skipped = 3;
    CHECK_THROWS_WITH_AS(train(store, world.vocab, world.text_params, cfg,
                               init_mapping({16, 16, 16}, 1)),
                         doctest::Contains("filter-starvation"), Error);
}

TEST_CASE("the training log carries the loss breakdown per applied step") {
    const SynthWorld world = generate_world(small_world_config());
    TrainConfig cfg = small_train_config();
    cfg.total_steps = 5;
    const TrainResult result = train(world.store, world.vocab, world.text_params, cfg,
                                     init_mapping({16, 16, 16}, cfg.seed));
    REQUIRE_FALSE(result.log_lines.empty());
    for (const auto& line : result.log_lines) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("step"));
        if (!j.value("skipped", false)) {
            CHECK(j.contains("l_compose"));
            CHECK(j.contains("l_align"));
            CHECK(j.contains("l_total"));
            CHECK(j.contains("grad_norm"));
        }
    }
}
