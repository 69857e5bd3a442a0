#pragma once

#include "di2w/common.hpp"
#include "di2w/encoders.hpp"
#include "di2w/ptc.hpp"

#include <utility>

// Pseudo-composed mapping: the trainable image-to-word network, the two
// contrastive objectives it is trained with, and exact reverse-mode
// gradients through the frozen text encoder into the network. Gradients are
// hand-derived for this fixed computation graph; a finite-difference checker
// validates them coordinate by coordinate.

namespace di2w {

enum class Activation { Tanh, Identity };
enum class Precision { F64, F32 };

struct MappingDims {
    Index input = 768;
    Index hidden = 768;
    Index output = 768;
};

/// Three affine layers with a nonlinearity between them, stored as one flat
/// parameter vector so the optimizer, checkpointing and gradient checking
/// can treat coordinates uniformly. The only trainable parameters in the
/// system live here.
class MappingParams {
public:
    MappingParams() = default;

    MappingParams(MappingDims dims, Activation act, VectorXd theta)
        : dims_(dims), act_(act), theta_(std::move(theta)) {
        if (theta_.size() != parameter_count(dims_))
            fail("shape-mismatch", "parameter vector does not match layer shapes");
        if (!theta_.allFinite()) fail("non-finite", "parameters contain a non-finite value");
    }

    static Index parameter_count(MappingDims d) {
        return d.hidden * d.input + d.hidden + d.hidden * d.hidden + d.hidden +
               d.output * d.hidden + d.output;
    }

    const MappingDims& dims() const { return dims_; }
    Activation activation() const { return act_; }
    const VectorXd& theta() const { return theta_; }
    std::uint64_t generation() const { return generation_; }

    void set_theta(VectorXd theta) {
        if (theta.size() != theta_.size()) fail("shape-mismatch", "parameter size change");
        theta_ = std::move(theta);
        ++generation_;
    }

    // Layer views into the flat vector.
    Eigen::Map<const MatrixXd> w1() const { return {theta_.data() + off(0), dims_.hidden, dims_.input}; }
    Eigen::Map<const VectorXd> b1() const { return {theta_.data() + off(1), dims_.hidden}; }
    Eigen::Map<const MatrixXd> w2() const { return {theta_.data() + off(2), dims_.hidden, dims_.hidden}; }
    Eigen::Map<const VectorXd> b2() const { return {theta_.data() + off(3), dims_.hidden}; }
    Eigen::Map<const MatrixXd> w3() const { return {theta_.data() + off(4), dims_.output, dims_.hidden}; }
    Eigen::Map<const VectorXd> b3() const { return {theta_.data() + off(5), dims_.output}; }

    std::uint64_t hash() const { return hash_matrix(theta_); }

    Index off(int part) const {
        const Index sizes[6] = {dims_.hidden * dims_.input, dims_.hidden,
                                dims_.hidden * dims_.hidden, dims_.hidden,
                                dims_.output * dims_.hidden, dims_.output};
        Index o = 0;
        for (int i = 0; i < part; ++i) o += sizes[i];
        return o;
    }

private:
    MappingDims dims_;
    Activation act_ = Activation::Tanh;
    VectorXd theta_;
    std::uint64_t generation_ = 0;
};

/// Fan-in scaled symmetric initialization, zero biases.
inline MappingParams init_mapping(MappingDims dims, std::uint64_t seed,
                                  Activation act = Activation::Tanh) {
    if (dims.input < 1 || dims.hidden < 1 || dims.output < 1)
        fail("invalid-argument", "mapping dimensions must be positive");
    VectorXd theta = VectorXd::Zero(MappingParams::parameter_count(dims));
    Rng rng(substream_seed(seed, "mapping-init"));
    const Index shapes[6][2] = {{dims.hidden, dims.input}, {dims.hidden, 0},
                                {dims.hidden, dims.hidden}, {dims.hidden, 0},
                                {dims.output, dims.hidden}, {dims.output, 0}};
    Index o = 0;
    for (const auto& sh : shapes) {
        if (sh[1] == 0) {
            o += sh[0];  // bias, stays zero
            continue;
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(sh[1]));
        for (Index i = 0; i < sh[0] * sh[1]; ++i) theta(o + i) = rng.uniform(-bound, bound);
        o += sh[0] * sh[1];
    }
    return MappingParams(dims, act, std::move(theta));
}

/// Linear pass-through network (identity weights, identity activation).
inline MappingParams make_identity_mapping(Index d) {
    MappingDims dims{d, d, d};
    VectorXd theta = VectorXd::Zero(MappingParams::parameter_count(dims));
    MappingParams p(dims, Activation::Identity, std::move(theta));
    VectorXd t = p.theta();
    for (int part : {0, 2, 4}) {
        Eigen::Map<MatrixXd> w(t.data() + p.off(part), d, d);
        w.setIdentity();
    }
    p.set_theta(std::move(t));
    return p;
}

template <typename Scalar>
struct MapWeights {
    MatrixX<Scalar> w1, w2, w3;
    VectorX<Scalar> b1, b2, b3;
};

template <typename Scalar>
MapWeights<Scalar> cast_map_weights(const MappingParams& p) {
    MapWeights<Scalar> w;
    w.w1 = p.w1().cast<Scalar>();
    w.b1 = p.b1().cast<Scalar>();
    w.w2 = p.w2().cast<Scalar>();
    w.b2 = p.b2().cast<Scalar>();
    w.w3 = p.w3().cast<Scalar>();
    w.b3 = p.b3().cast<Scalar>();
    return w;
}

template <typename Scalar>
struct MapCacheT {
    std::uint64_t generation = 0;
    MatrixX<Scalar> x, z1, a1, z2, a2, s;
};
using MapCache = MapCacheT<double>;

namespace detail {

template <typename Scalar>
MatrixX<Scalar> apply_act(const MatrixX<Scalar>& z, Activation act) {
    if (act == Activation::Identity) return z;
    return z.array().tanh();
}

template <typename Scalar>
MatrixX<Scalar> act_prime_from_out(const MatrixX<Scalar>& a, Activation act) {
    if (act == Activation::Identity) return MatrixX<Scalar>::Ones(a.rows(), a.cols());
    return (Scalar(1) - a.array().square()).matrix();
}

template <typename Scalar>
MapCacheT<Scalar> map_forward_core(const MatrixX<Scalar>& x, const MapWeights<Scalar>& w,
                                   Activation act) {
    MapCacheT<Scalar> c;
    c.x = x;
    c.z1 = (x * w.w1.transpose()).rowwise() + w.b1.transpose();
    c.a1 = apply_act(c.z1, act);
    c.z2 = (c.a1 * w.w2.transpose()).rowwise() + w.b2.transpose();
    c.a2 = apply_act(c.z2, act);
    c.s = (c.a2 * w.w3.transpose()).rowwise() + w.b3.transpose();
    return c;
}

template <typename Scalar>
VectorX<Scalar> map_backward_core(const MapCacheT<Scalar>& c, const MapWeights<Scalar>& w,
                                  Activation act, const MatrixX<Scalar>& d_s) {
    const MatrixX<Scalar> dz3 = d_s;  // output layer is affine
    const MatrixX<Scalar> da2 = dz3 * w.w3;
    const MatrixX<Scalar> dz2 = da2.cwiseProduct(act_prime_from_out(c.a2, act));
    const MatrixX<Scalar> da1 = dz2 * w.w2;
    const MatrixX<Scalar> dz1 = da1.cwiseProduct(act_prime_from_out(c.a1, act));

    const Index nin = w.w1.cols(), nh = w.w1.rows(), nout = w.w3.rows();
    VectorX<Scalar> grad(nh * nin + nh + nh * nh + nh + nout * nh + nout);
    Index o = 0;
    auto put_mat = [&](const MatrixX<Scalar>& m) {
        Eigen::Map<MatrixX<Scalar>>(grad.data() + o, m.rows(), m.cols()) = m;
        o += m.rows() * m.cols();
    };
    auto put_vec = [&](const VectorX<Scalar>& v) {
        grad.segment(o, v.size()) = v;
        o += v.size();
    };
    put_mat(dz1.transpose() * c.x);
    put_vec(dz1.colwise().sum().transpose());
    put_mat(dz2.transpose() * c.a1);
    put_vec(dz2.colwise().sum().transpose());
    put_mat(dz3.transpose() * c.a2);
    put_vec(dz3.colwise().sum().transpose());
    return grad;
}

}  // namespace detail

/// Batched forward pass; rows of `refs` are input embeddings, rows of the
/// result are pseudo tokens.
inline std::pair<MatrixXd, MapCache> map_forward(const MappingParams& params,
                                                 const MatrixXd& refs) {
    if (refs.cols() != params.dims().input)
        fail("dimension-mismatch", "mapping input dimension mismatch");
    auto w = cast_map_weights<double>(params);
    MapCache c = detail::map_forward_core<double>(refs, w, params.activation());
    c.generation = params.generation();
    return {c.s, std::move(c)};
}

inline std::pair<VectorXd, MapCache> map_forward(const MappingParams& params,
                                                 const VectorXd& ref) {
    auto [s, cache] = map_forward(params, MatrixXd(ref.transpose()));
    return {s.row(0).transpose(), std::move(cache)};
}

/// Backpropagates d(loss)/d(pseudo tokens) to a flat parameter gradient.
/// The cache must come from the same parameter generation.
inline VectorXd map_backward(const MappingParams& params, const MapCache& cache,
                             const MatrixXd& d_s) {
    if (cache.generation != params.generation())
        fail("stale-cache", "forward cache predates a parameter update");
    if (d_s.rows() != cache.s.rows() || d_s.cols() != cache.s.cols())
        fail("dimension-mismatch", "upstream gradient shape mismatch");
    auto w = cast_map_weights<double>(params);
    return detail::map_backward_core<double>(cache, w, params.activation(), d_s);
}

// ---------------------------------------------------------------------------
// Contrastive core

template <typename Scalar>
struct ContrastiveResult {
    Scalar loss = 0;
    MatrixX<Scalar> grad_a;  // d(loss)/d(a_hat)
    MatrixX<Scalar> grad_b;  // d(loss)/d(b_hat)
};

/// One direction of the symmetric InfoNCE pair: row i of `a_hat` should
/// match row i of `b_hat` against all other rows. Logits are tau * a b^T,
/// evaluated with log-sum-exp stabilization. Inputs must be row-normalized;
/// the swapped direction is the same call with arguments exchanged.
template <typename Scalar>
ContrastiveResult<Scalar> contrastive_pair_loss(const MatrixX<Scalar>& a_hat,
                                                const MatrixX<Scalar>& b_hat, Scalar tau) {
    const Index m = a_hat.rows();
    if (m < 1) fail("batch-too-small", "contrastive loss needs at least one pair");
    if (b_hat.rows() != m || b_hat.cols() != a_hat.cols())
        fail("dimension-mismatch", "contrastive inputs disagree in shape");
    if (!(tau > Scalar(0))) fail("invalid-temperature", "temperature must be positive");
    for (Index r = 0; r < m; ++r) {
        if (std::abs(a_hat.row(r).norm() - Scalar(1)) > Scalar(1e-6) ||
            std::abs(b_hat.row(r).norm() - Scalar(1)) > Scalar(1e-6))
            fail("not-normalized", "contrastive inputs must be row-normalized");
    }

    const MatrixX<Scalar> logits = tau * (a_hat * b_hat.transpose());
    const VectorX<Scalar> row_max = logits.rowwise().maxCoeff();
    const MatrixX<Scalar> shifted = logits.colwise() - row_max;
    const MatrixX<Scalar> expz = shifted.array().exp();
    const VectorX<Scalar> denom = expz.rowwise().sum();
    const VectorX<Scalar> lse = denom.array().log() + row_max.array();

    ContrastiveResult<Scalar> r;
    r.loss = (lse - logits.diagonal()).sum() / Scalar(m);
    MatrixX<Scalar> softmax = expz.array().colwise() / denom.array();
    softmax.diagonal().array() -= Scalar(1);
    softmax *= tau / Scalar(m);
    r.grad_a = softmax * b_hat;
    r.grad_b = softmax.transpose() * a_hat;
    return r;
}

// ---------------------------------------------------------------------------
// Training objectives

struct LossConfig {
    double tau = 100.0;
    bool use_compose = true;
    bool use_align = true;
    /// Pair the caption-free prompt with the target embedding instead of the
    /// reference embedding.
    bool align_with_target = false;
    Connective connective = Connective::Comma;
    Precision precision = Precision::F64;
};

struct LossBreakdown {
    double l_compose = 0;
    double l_align = 0;
    double l_total = 0;
    double compose_t2i = 0, compose_i2t = 0;
    double align_t2i = 0, align_i2t = 0;
};

struct SlotGradResult {
    double loss = 0;
    double t2i = 0, i2t = 0;
    MatrixXd d_slot;  // m x token_dim, d(loss)/d(pseudo token)
};

namespace detail {

template <typename Scalar>
struct PreparedPrompt {
    MatrixX<Scalar> embeddings;
    Index slot = -1;
};

template <typename Scalar>
PreparedPrompt<Scalar> prepare_prompt(TemplateKind kind,
                                      const std::vector<std::uint32_t>& extra,
                                      const Vocabulary& vocab, const ToyTextParams& text,
                                      Connective connective) {
    PromptSequence seq = build_prompt(kind, std::nullopt, extra, vocab, connective);
    check_sequence(seq, text);
    if (!seq.slot_index) fail("missing-slot", "training prompt must carry a slot");
    PreparedPrompt<Scalar> p;
    p.embeddings = seq.token_embeddings.cast<Scalar>();
    p.slot = *seq.slot_index;
    return p;
}

// Shared contrastive path: substitute pseudo tokens into prompts, encode,
// normalize, evaluate both loss directions against the normalized pair
// matrix, and (optionally) return d(loss)/d(pseudo token).
template <typename Scalar>
SlotGradResult prompt_pair_loss(const MatrixX<Scalar>& pseudo_tokens,
                                std::vector<PreparedPrompt<Scalar>>& prompts,
                                const MatrixX<Scalar>& pair_raw,
                                const TextWeights<Scalar>& tw, Scalar tau,
                                bool compute_grads) {
    const Index m = pseudo_tokens.rows();
    MatrixX<Scalar> sentences(m, tw.b2.size());
    for (Index i = 0; i < m; ++i) {
        prompts[static_cast<std::size_t>(i)].embeddings.row(
            prompts[static_cast<std::size_t>(i)].slot) = pseudo_tokens.row(i);
        sentences.row(i) = text_forward_core<Scalar>(
                               prompts[static_cast<std::size_t>(i)].embeddings, tw)
                               .transpose();
    }
    const VectorX<Scalar> norms = sentences.rowwise().norm();
    for (Index i = 0; i < m; ++i)
        if (!(norms(i) > Scalar(0))) fail("zero-vector", "sentence embedding has zero norm");
    const MatrixX<Scalar> t_hat = sentences.array().colwise() / norms.array();
    const MatrixX<Scalar> pair_hat = l2_normalize_rows<Scalar>(pair_raw);

    const auto t2i = contrastive_pair_loss<Scalar>(t_hat, pair_hat, tau);
    const auto i2t = contrastive_pair_loss<Scalar>(pair_hat, t_hat, tau);

    SlotGradResult out;
    out.t2i = static_cast<double>(t2i.loss);
    out.i2t = static_cast<double>(i2t.loss);
    out.loss = out.t2i + out.i2t;
    if (!compute_grads) return out;

    const MatrixX<Scalar> d_that = t2i.grad_a + i2t.grad_b;
    out.d_slot.resize(m, pseudo_tokens.cols());
    for (Index i = 0; i < m; ++i) {
        // Through the row normalization: g = (g_hat - (g_hat . t_hat) t_hat) / ||t||.
        const VectorX<Scalar> gh = d_that.row(i).transpose();
        const VectorX<Scalar> th = t_hat.row(i).transpose();
        const VectorX<Scalar> gt = (gh - gh.dot(th) * th) / norms(i);
        const VectorX<Scalar> gs = text_slot_grad_core<Scalar>(
            prompts[static_cast<std::size_t>(i)].embeddings,
            prompts[static_cast<std::size_t>(i)].slot, gt, tw);
        out.d_slot.row(i) = gs.template cast<double>().transpose();
    }
    return out;
}

template <typename Scalar>
SlotGradResult compose_impl(const MatrixX<Scalar>& pseudo_tokens,
                            const std::vector<PseudoTriplet>& triplets,
                            const Vocabulary& vocab, const ToyTextParams& text,
                            const TextWeights<Scalar>& tw, const LossConfig& cfg,
                            bool compute_grads) {
    const Index m = static_cast<Index>(triplets.size());
    std::vector<PreparedPrompt<Scalar>> prompts;
    prompts.reserve(static_cast<std::size_t>(m));
    MatrixX<Scalar> targets(m, triplets.front().target.size());
    for (Index i = 0; i < m; ++i) {
        const auto& t = triplets[static_cast<std::size_t>(i)];
        prompts.push_back(prepare_prompt<Scalar>(TemplateKind::ComposeTrain, t.caption_tokens,
                                                 vocab, text, cfg.connective));
        targets.row(i) = t.target.cast<Scalar>().transpose();
    }
    return prompt_pair_loss<Scalar>(pseudo_tokens, prompts, targets, tw,
                                    static_cast<Scalar>(cfg.tau), compute_grads);
}

template <typename Scalar>
SlotGradResult align_impl(const MatrixX<Scalar>& pseudo_tokens, const MatrixX<Scalar>& pair_raw,
                          const Vocabulary& vocab, const ToyTextParams& text,
                          const TextWeights<Scalar>& tw, const LossConfig& cfg,
                          bool compute_grads) {
    const Index m = pseudo_tokens.rows();
    std::vector<PreparedPrompt<Scalar>> prompts;
    prompts.reserve(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i)
        prompts.push_back(
            prepare_prompt<Scalar>(TemplateKind::Global, {}, vocab, text, cfg.connective));
    return prompt_pair_loss<Scalar>(pseudo_tokens, prompts, pair_raw, tw,
                                    static_cast<Scalar>(cfg.tau), compute_grads);
}

template <typename Scalar>
std::pair<LossBreakdown, VectorXd> total_impl(const MappingParams& params,
                                              const std::vector<PseudoTriplet>& triplets,
                                              const Vocabulary& vocab,
                                              const ToyTextParams& text, const LossConfig& cfg,
                                              bool compute_grads) {
    const Index m = static_cast<Index>(triplets.size());
    if (m < 2) fail("batch-too-small", "contrastive training needs a batch of at least 2");
    if (!cfg.use_compose && !cfg.use_align)
        fail("invalid-argument", "both loss terms are disabled");

    const Index d = params.dims().input;
    MatrixX<Scalar> refs(m, d);
    for (Index i = 0; i < m; ++i) {
        if (triplets[static_cast<std::size_t>(i)].reference.size() != d)
            fail("dimension-mismatch", "reference embedding dimension mismatch");
        refs.row(i) = triplets[static_cast<std::size_t>(i)].reference.cast<Scalar>().transpose();
    }
    const auto mw = cast_map_weights<Scalar>(params);
    const auto tw = text.cast<Scalar>();
    const MapCacheT<Scalar> cache = map_forward_core<Scalar>(refs, mw, params.activation());

    LossBreakdown bd;
    MatrixXd d_slot = MatrixXd::Zero(m, params.dims().output);
    if (cfg.use_compose) {
        auto r = compose_impl<Scalar>(cache.s, triplets, vocab, text, tw, cfg, compute_grads);
        bd.l_compose = r.loss;
        bd.compose_t2i = r.t2i;
        bd.compose_i2t = r.i2t;
        if (compute_grads) d_slot += r.d_slot;
    }
    if (cfg.use_align) {
        MatrixX<Scalar> pair(m, d);
        for (Index i = 0; i < m; ++i) {
            const auto& t = triplets[static_cast<std::size_t>(i)];
            pair.row(i) = (cfg.align_with_target ? t.target : t.reference)
                              .cast<Scalar>()
                              .transpose();
        }
        auto r = align_impl<Scalar>(cache.s, pair, vocab, text, tw, cfg, compute_grads);
        bd.l_align = r.loss;
        bd.align_t2i = r.t2i;
        bd.align_i2t = r.i2t;
        if (compute_grads) d_slot += r.d_slot;
    }
    bd.l_total = bd.l_compose + bd.l_align;

    VectorXd grad;
    if (compute_grads) {
        const MatrixX<Scalar> d_slot_s = d_slot.cast<Scalar>();
        grad = map_backward_core<Scalar>(cache, mw, params.activation(), d_slot_s)
                   .template cast<double>();
    }
    return {bd, std::move(grad)};
}

}  // namespace detail

/// Caption-conditioned objective: encode "a photo of [*] <connective>
/// <caption>" with the pseudo token of each triplet's reference and match it
/// contrastively (both directions) against the normalized target embeddings.
inline SlotGradResult compose_loss(const MappingParams& params,
                                   const std::vector<PseudoTriplet>& triplets,
                                   const Vocabulary& vocab, const ToyTextParams& text,
                                   const LossConfig& cfg = {}) {
    if (triplets.size() < 2) fail("batch-too-small", "compose loss needs a batch of at least 2");
    const Index m = static_cast<Index>(triplets.size());
    MatrixXd refs(m, params.dims().input);
    for (Index i = 0; i < m; ++i)
        refs.row(i) = triplets[static_cast<std::size_t>(i)].reference.transpose();
    auto [s, cache] = map_forward(params, refs);
    auto tw = text.cast<double>();
    return detail::compose_impl<double>(s, triplets, vocab, text, tw, cfg, true);
}

/// Caption-free objective: encode "a photo of" with the pseudo token
/// appended and match it against the (normalized) reference embeddings.
/// Captions play no part here.
inline SlotGradResult align_loss(const MappingParams& params, const MatrixXd& references,
                                 const Vocabulary& vocab, const ToyTextParams& text,
                                 const LossConfig& cfg = {}) {
    if (references.rows() < 2) fail("batch-too-small", "align loss needs a batch of at least 2");
    auto [s, cache] = map_forward(params, references);
    auto tw = text.cast<double>();
    return detail::align_impl<double>(s, references, vocab, text, tw, cfg, true);
}

/// Sum of the two objectives with parameter gradients backpropagated through
/// the shared mapping forward pass. The ablation switches in `cfg` zero out
/// either term.
inline std::pair<LossBreakdown, VectorXd> total_loss_and_grads(
    const MappingParams& params, const std::vector<PseudoTriplet>& triplets,
    const Vocabulary& vocab, const ToyTextParams& text, const LossConfig& cfg = {}) {
    if (cfg.precision == Precision::F32)
        return detail::total_impl<float>(params, triplets, vocab, text, cfg, true);
    return detail::total_impl<double>(params, triplets, vocab, text, cfg, true);
}

inline double total_loss_value(const MappingParams& params,
                               const std::vector<PseudoTriplet>& triplets,
                               const Vocabulary& vocab, const ToyTextParams& text,
                               const LossConfig& cfg = {}) {
    return detail::total_impl<double>(params, triplets, vocab, text, cfg, false).first.l_total;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct FiniteDiffOptions {
    double h = 1e-5;
    double tolerance = 1e-5;
    /// 0 checks every coordinate; otherwise a random subset of at least 200.
    Index max_coords = 0;
    std::uint64_t seed = 0;
    /// Relative-error denominator floor for near-zero coordinates.
    double denom_floor = 1e-6;
    /// Fault injection: doubles the analytic gradient at this coordinate, to
    /// prove the check can fail. -1 disables.
    Index corrupt_coord = -1;
};

struct FiniteDiffEntry {
    Index coord = 0;
    double analytic = 0, numeric = 0, rel_err = 0;
};

struct FiniteDiffReport {
    double max_rel_err = 0;
    Index coords_checked = 0;
    bool pass = false;
    FiniteDiffEntry worst;
};

/// Central-difference check of the analytic parameter gradient of the
/// configured objective. 64-bit only.
inline FiniteDiffReport finite_diff_check(const MappingParams& params,
                                          const std::vector<PseudoTriplet>& triplets,
                                          const Vocabulary& vocab, const ToyTextParams& text,
                                          const LossConfig& cfg, FiniteDiffOptions opts = {}) {
    if (cfg.precision != Precision::F64)
        fail("invalid-argument", "gradient checking requires 64-bit mode");
    auto [bd, grad] = total_loss_and_grads(params, triplets, vocab, text, cfg);
    if (opts.corrupt_coord >= 0 && opts.corrupt_coord < grad.size())
        grad(opts.corrupt_coord) *= 2.0;

    const Index n = grad.size();
    std::vector<Index> coords;
    if (opts.max_coords > 0 && opts.max_coords < n) {
        const Index want = std::max<Index>(opts.max_coords, 200);
        Rng rng(substream_seed(opts.seed, "fd-coords"));
        auto perm = rng.permutation(n);
        coords.assign(perm.begin(), perm.begin() + std::min(want, n));
    } else {
        coords.resize(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }

    FiniteDiffReport report;
    report.coords_checked = static_cast<Index>(coords.size());
    for (Index k : coords) {
        VectorXd theta = params.theta();
        theta(k) += opts.h;
        const double up = total_loss_value(
            MappingParams(params.dims(), params.activation(), theta), triplets, vocab, text, cfg);
        theta(k) -= 2.0 * opts.h;
        const double down = total_loss_value(
            MappingParams(params.dims(), params.activation(), theta), triplets, vocab, text, cfg);
        const double numeric = (up - down) / (2.0 * opts.h);
        const double denom =
            std::max({std::abs(grad(k)), std::abs(numeric), opts.denom_floor});
        const double rel = std::abs(grad(k) - numeric) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst = {k, grad(k), numeric, rel};
        }
    }
    report.pass = report.max_rel_err <= opts.tolerance;
    return report;
}

}  // namespace di2w
