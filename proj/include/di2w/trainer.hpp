#pragma once

#include "di2w/binio.hpp"
#include "di2w/common.hpp"
#include "di2w/pcm.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <sstream>

// Optimization loop. Every random decision in a run derives from the config
// seed and the step (or epoch) index, so a run can be reproduced, and a
// resumed run follows the uninterrupted trajectory exactly.

namespace di2w {

struct TrainConfig {
    double learning_rate = 1e-5;
    double weight_decay = 0.1;
    long warmup_steps = 100;
    Index batch_size = 64;
    double tau = 100.0;
    int crop_min = 32;
    int crop_max = 64;
    double p_other_crop = 0.25;
    double p_other_original = 0.10;
    long total_steps = 200;
    std::uint64_t seed = 42;
    Precision precision = Precision::F64;
    bool use_compose = true;
    bool use_align = true;
    bool align_with_target = false;
    Connective connective = Connective::Comma;
    bool cosine_text_image = false;
    long checkpoint_interval = 0;  // 0 = no periodic checkpoints
    int max_consecutive_skipped = 50;
    Index hidden_dim = 0;  // 0 = same as the store dimension

    LossConfig loss_config() const {
        LossConfig c;
        c.tau = tau;
        c.use_compose = use_compose;
        c.use_align = use_align;
        c.align_with_target = align_with_target;
        c.connective = connective;
        c.precision = precision;
        return c;
    }

    PtcConfig ptc_config() const {
        PtcConfig c;
        c.crop.crop_min = crop_min;
        c.crop.crop_max = crop_max;
        c.p_other_crop = p_other_crop;
        c.p_other_original = p_other_original;
        c.cosine_text_image = cosine_text_image;
        return c;
    }

    nlohmann::json to_json() const {
        return {{"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"warmup_steps", warmup_steps},
                {"batch_size", batch_size},
                {"tau", tau},
                {"crop_min", crop_min},
                {"crop_max", crop_max},
                {"p_other_crop", p_other_crop},
                {"p_other_original", p_other_original},
                {"total_steps", total_steps},
                {"seed", seed},
                {"precision", precision == Precision::F64 ? "f64" : "f32"},
                {"use_compose", use_compose},
                {"use_align", use_align},
                {"align_with_target", align_with_target},
                {"connective", connective == Connective::Comma ? "comma" : "that"},
                {"cosine_text_image", cosine_text_image},
                {"hidden_dim", hidden_dim}};
    }
};

inline void validate_train_config(const TrainConfig& cfg) {
    if (cfg.learning_rate <= 0 || cfg.weight_decay < 0 || cfg.tau <= 0)
        fail("invalid-argument", "learning rate and temperature must be positive");
    if (cfg.batch_size < 2) fail("invalid-argument", "batch size must be at least 2");
    if (cfg.warmup_steps < 0 || cfg.total_steps < 0)
        fail("invalid-argument", "step counts must be non-negative");
}

/// Linear warmup to the base rate, constant afterwards.
inline double lr_at_step(long step, const TrainConfig& cfg) {
    if (step < 0) fail("invalid-argument", "step must be non-negative");
    if (cfg.warmup_steps <= 0) return cfg.learning_rate;
    const double frac = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.learning_rate * std::min(1.0, frac);
}

struct OptimizerState {
    VectorXd m;  // first moment
    VectorXd v;  // second moment
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerState zeros_like(const MappingParams& params) {
        OptimizerState s;
        s.m = VectorXd::Zero(params.theta().size());
        s.v = VectorXd::Zero(params.theta().size());
        return s;
    }
};

/// One decoupled-weight-decay adaptive step: bias-corrected moment update
/// plus a separate theta <- theta - lr * lambda * theta shrink.
inline void adamw_step(MappingParams& params, const VectorXd& grads, OptimizerState& state,
                       double lr, double weight_decay) {
    if (grads.size() != params.theta().size() || state.m.size() != grads.size() ||
        state.v.size() != grads.size())
        fail("shape-mismatch", "gradient/state size does not match parameters");
    if (!grads.allFinite())
        fail("non-finite-gradient", "aborting update: gradient contains a non-finite value");
    state.step += 1;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const VectorXd m_hat = state.m / c1;
    const VectorXd v_hat = state.v / c2;
    VectorXd theta = params.theta();
    theta -= lr * (m_hat.array() / (v_hat.array().sqrt() + state.eps)).matrix();
    theta -= (lr * weight_decay) * params.theta();
    params.set_theta(std::move(theta));
}

// ---------------------------------------------------------------------------
// Checkpoints: mapping parameters plus optimizer state, f64 little-endian.

inline constexpr char kCheckpointMagic[4] = {'D', 'I', '2', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    MappingParams params;
    OptimizerState opt;
};

inline std::size_t write_checkpoint(const std::string& path, const MappingParams& params,
                                    const OptimizerState& opt) {
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.dims().input));
    w.u32(static_cast<std::uint32_t>(params.dims().hidden));
    w.u32(static_cast<std::uint32_t>(params.dims().output));
    w.u8(params.activation() == Activation::Tanh ? 0 : 1);
    w.u64(static_cast<std::uint64_t>(opt.step));
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.eps);
    w.u64(static_cast<std::uint64_t>(params.theta().size()));
    for (Index i = 0; i < params.theta().size(); ++i) w.f64(params.theta()(i));
    for (Index i = 0; i < opt.m.size(); ++i) w.f64(opt.m(i));
    for (Index i = 0; i < opt.v.size(); ++i) w.f64(opt.v(i));
    return w.write_file(path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.u8());
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        fail("bad-magic", "not a checkpoint file: " + path);
    if (r.u16() != kCheckpointVersion) fail("unsupported-version", "checkpoint version");
    MappingDims dims;
    dims.input = static_cast<Index>(r.u32());
    dims.hidden = static_cast<Index>(r.u32());
    dims.output = static_cast<Index>(r.u32());
    const Activation act = r.u8() == 0 ? Activation::Tanh : Activation::Identity;
    Checkpoint ck;
    ck.opt.step = static_cast<long>(r.u64());
    ck.opt.beta1 = r.f64();
    ck.opt.beta2 = r.f64();
    ck.opt.eps = r.f64();
    const auto n = static_cast<Index>(r.u64());
    if (n != MappingParams::parameter_count(dims))
        fail("invalid-record", "checkpoint parameter count does not match its shapes");
    VectorXd theta(n), m(n), v(n);
    for (Index i = 0; i < n; ++i) theta(i) = r.f64();
    for (Index i = 0; i < n; ++i) m(i) = r.f64();
    for (Index i = 0; i < n; ++i) v(i) = r.f64();
    if (!r.exhausted()) fail("truncated", "checkpoint has trailing bytes");
    if (!m.allFinite() || !v.allFinite())
        fail("non-finite", "checkpoint optimizer state contains a non-finite value");
    ck.params = MappingParams(dims, act, std::move(theta));
    ck.opt.m = std::move(m);
    ck.opt.v = std::move(v);
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    MappingParams params;
    OptimizerState opt;
    std::vector<std::string> log_lines;
    long steps_applied = 0;
    long steps_skipped = 0;
    double first_loss = 0;
    double last_loss = 0;
};

using CheckpointSink =
    std::function<void(long step, const MappingParams&, const OptimizerState&)>;

/// Runs steps [start_step, cfg.total_steps). Each step draws a batch from a
/// per-epoch shuffle, constructs pseudo triplets, and applies one optimizer
/// update; a step whose batch yields fewer than two triplets is skipped.
/// Batch order and all random draws depend only on (seed, step index).
inline TrainResult train(const StoreRecords& store, const Vocabulary& vocab,
                         const ToyTextParams& text, const TrainConfig& cfg,
                         MappingParams params, OptimizerState opt = {}, long start_step = 0,
                         const CheckpointSink& on_checkpoint = nullptr) {
    validate_train_config(cfg);
    if (store.images.empty()) fail("empty-store", "training needs a non-empty store");
    if (opt.m.size() == 0) opt = OptimizerState::zeros_like(params);

    // Pair every image with its first caption, in store order.
    std::unordered_map<std::string, const CaptionRecord*> caption_of;
    for (const auto& cap : store.captions) caption_of.emplace(cap.image_id, &cap);
    std::vector<BatchItem> pairs;
    for (const auto& img : store.images) {
        auto it = caption_of.find(img.id);
        if (it != caption_of.end()) pairs.push_back({&img, it->second});
    }
    const auto n_pairs = static_cast<Index>(pairs.size());
    if (n_pairs < cfg.batch_size)
        fail("store-too-small", "store has " + std::to_string(n_pairs) +
                                    " captioned images, batch size is " +
                                    std::to_string(cfg.batch_size));
    const long steps_per_epoch = static_cast<long>(n_pairs / cfg.batch_size);

    const PtcConfig ptc_cfg = cfg.ptc_config();
    const LossConfig loss_cfg = cfg.loss_config();

    TrainResult result{std::move(params), std::move(opt), {}, 0, 0, 0, 0};
    int consecutive_skipped = 0;
    bool first_recorded = false;

    for (long step = start_step; step < cfg.total_steps; ++step) {
        const long epoch = step / steps_per_epoch;
        const long slot = step % steps_per_epoch;
        Rng epoch_rng(substream_seed(cfg.seed, "batch-epoch", static_cast<std::uint64_t>(epoch)));
        const auto perm = epoch_rng.permutation(n_pairs);
        std::vector<BatchItem> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (Index k = 0; k < cfg.batch_size; ++k)
            batch.push_back(pairs[static_cast<std::size_t>(
                perm[static_cast<std::size_t>(slot * cfg.batch_size + k)])]);

        Rng step_rng(substream_seed(cfg.seed, "ptc-step", static_cast<std::uint64_t>(step)));
        const auto triplets = construct_pseudo_triplets(batch, step_rng, ptc_cfg);
        if (static_cast<Index>(triplets.size()) < 2) {
            result.steps_skipped += 1;
            if (++consecutive_skipped > cfg.max_consecutive_skipped)
                fail("filter-starvation",
                     "more than " + std::to_string(cfg.max_consecutive_skipped) +
                         " consecutive batches produced fewer than 2 triplets");
            nlohmann::json line = {{"step", step}, {"skipped", true}};
            result.log_lines.push_back(line.dump());
            continue;
        }
        consecutive_skipped = 0;

        auto [bd, grads] = total_loss_and_grads(result.params, triplets, vocab, text, loss_cfg);
        adamw_step(result.params, grads, result.opt, lr_at_step(step, cfg), cfg.weight_decay);
        result.steps_applied += 1;
        if (!first_recorded) {
            result.first_loss = bd.l_total;
            first_recorded = true;
        }
        result.last_loss = bd.l_total;

        nlohmann::json line = {{"step", step},
                               {"l_compose", bd.l_compose},
                               {"l_align", bd.l_align},
                               {"l_total", bd.l_total},
                               {"grad_norm", grads.norm()}};
        result.log_lines.push_back(line.dump());

        if (on_checkpoint && cfg.checkpoint_interval > 0 &&
            (step + 1) % cfg.checkpoint_interval == 0)
            on_checkpoint(step + 1, result.params, result.opt);
    }
    return result;
}

}  // namespace di2w
