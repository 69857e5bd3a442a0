#pragma once

#include "di2w/common.hpp"
#include "di2w/embedding_store.hpp"

#include <optional>
#include <unordered_map>

// Frozen encoder pair. The text encoder is a position-weighted pool followed
// by a one-hidden-layer tanh map; the image encoder projects a sum of concept
// vectors. Both are deterministic functions of their seed and never receive
// gradient updates; gradients may still flow through the text encoder into a
// prompt's pseudo-token slot.

namespace di2w {

// Reserved token ids, fixed across every vocabulary.
inline constexpr std::uint32_t kTokenA = 0;
inline constexpr std::uint32_t kTokenPhoto = 1;
inline constexpr std::uint32_t kTokenOf = 2;
inline constexpr std::uint32_t kTokenComma = 3;
inline constexpr std::uint32_t kTokenAnd = 4;
inline constexpr std::uint32_t kTokenThat = 5;
inline constexpr std::uint32_t kTokenSlot = 6;  // the [*] placeholder
inline constexpr std::uint32_t kReservedTokens = 7;

class Vocabulary {
public:
    /// Builds the frozen token table: reserved words first, then
    /// `extra_words`. Rows are seeded normal draws scaled to roughly unit
    /// norm.
    static Vocabulary build(const std::vector<std::string>& extra_words, Index token_dim,
                            std::uint64_t seed) {
        Vocabulary v;
        v.token_dim_ = token_dim;
        v.seed_ = seed;
        v.words_ = {"a", "photo", "of", ",", "and", "that", "[*]"};
        for (const auto& w : extra_words) v.words_.push_back(w);
        for (std::uint32_t i = 0; i < v.words_.size(); ++i) {
            if (!v.index_.emplace(v.words_[i], i).second)
                fail("duplicate-token", "word appears twice in vocabulary: " + v.words_[i]);
        }
        Rng rng(substream_seed(seed, "vocab-table"));
        v.table_ = rng.normal_matrix(static_cast<Index>(v.words_.size()), token_dim,
                                     1.0 / std::sqrt(static_cast<double>(token_dim)));
        return v;
    }

    /// Vocabulary over an explicit token table (reserved words first). Rows
    /// beyond the reserved block correspond to `extra_words` in order.
    static Vocabulary from_table(const std::vector<std::string>& extra_words, MatrixXd table) {
        Vocabulary v;
        v.token_dim_ = table.cols();
        v.words_ = {"a", "photo", "of", ",", "and", "that", "[*]"};
        for (const auto& w : extra_words) v.words_.push_back(w);
        if (table.rows() != static_cast<Index>(v.words_.size()))
            fail("dimension-mismatch", "token table row count does not match word count");
        if (!table.allFinite()) fail("non-finite", "token table contains a non-finite value");
        for (std::uint32_t i = 0; i < v.words_.size(); ++i) {
            if (!v.index_.emplace(v.words_[i], i).second)
                fail("duplicate-token", "word appears twice in vocabulary: " + v.words_[i]);
        }
        v.table_ = std::move(table);
        return v;
    }

    Index size() const { return table_.rows(); }
    Index token_dim() const { return token_dim_; }
    std::uint64_t seed() const { return seed_; }
    const MatrixXd& table() const { return table_; }
    const std::vector<std::string>& words() const { return words_; }

    std::uint32_t id(const std::string& word) const {
        auto it = index_.find(word);
        if (it == index_.end()) fail("unknown-token", "word not in vocabulary: " + word);
        return it->second;
    }

    bool contains(const std::string& word) const { return index_.count(word) > 0; }

    const std::string& word(std::uint32_t id) const {
        if (id >= words_.size())
            fail("unknown-token", "token id out of range: " + std::to_string(id));
        return words_[id];
    }

    VectorXd embedding(std::uint32_t id) const {
        if (static_cast<Index>(id) >= table_.rows())
            fail("unknown-token", "token id out of range: " + std::to_string(id));
        return table_.row(static_cast<Index>(id)).transpose();
    }

    std::uint64_t hash() const {
        std::uint64_t h = kFnvOffset;
        for (const auto& w : words_) h = fnv1a64(w, h);
        return hash_matrix(table_, h);
    }

private:
    Index token_dim_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::uint32_t> index_;
    MatrixXd table_;
};

enum class Connective { Comma, That };

enum class TemplateKind {
    Caption,               // bare caption tokens, no slot
    ComposeTrain,          // "a photo of [*] <connective> <caption>"
    Global,                // "a photo of" with [*] appended at the end
    DomainConversion,      // "a <tag> of [*]"
    ObjectComposition,     // "a photo of [*] , <tag> and <tag> , and <tag> ..."
    SentenceManipulation,  // "a photo of [*] , <sentence>"
};

inline const char* to_string(TemplateKind k) {
    switch (k) {
        case TemplateKind::Caption: return "caption";
        case TemplateKind::ComposeTrain: return "compose";
        case TemplateKind::Global: return "global";
        case TemplateKind::DomainConversion: return "domain_conversion";
        case TemplateKind::ObjectComposition: return "object_composition";
        case TemplateKind::SentenceManipulation: return "sentence_manipulation";
    }
    return "?";
}

struct PromptSequence {
    std::vector<std::uint32_t> token_ids;  // kTokenSlot marks the slot position
    MatrixXd token_embeddings;             // length x token_dim, one row per position
    std::optional<Index> slot_index;

    Index length() const { return token_embeddings.rows(); }
};

/// Renders a prompt template to its token-embedding sequence. When
/// `pseudo_token` is given the slot row is pre-filled with it; otherwise the
/// slot keeps the placeholder row from the vocabulary and the caller fills it
/// later.
inline PromptSequence build_prompt(TemplateKind kind,
                                   const std::optional<VectorXd>& pseudo_token,
                                   const std::vector<std::uint32_t>& extra_tokens,
                                   const Vocabulary& vocab,
                                   Connective connective = Connective::Comma) {
    for (auto t : extra_tokens) {
        if (static_cast<Index>(t) >= vocab.size())
            fail("unknown-token", "token id out of range: " + std::to_string(t));
    }
    std::vector<std::uint32_t> ids;
    std::optional<Index> slot;
    const std::uint32_t conn = connective == Connective::Comma ? kTokenComma : kTokenThat;
    switch (kind) {
        case TemplateKind::Caption:
            if (extra_tokens.empty()) fail("empty-prompt", "caption template needs tokens");
            ids = extra_tokens;
            break;
        case TemplateKind::ComposeTrain:
            if (extra_tokens.empty())
                fail("empty-prompt", "compose template needs caption tokens");
            ids = {kTokenA, kTokenPhoto, kTokenOf, kTokenSlot, conn};
            ids.insert(ids.end(), extra_tokens.begin(), extra_tokens.end());
            slot = 3;
            break;
        case TemplateKind::Global:
            if (!extra_tokens.empty())
                fail("invalid-template", "global template takes no extra tokens");
            ids = {kTokenA, kTokenPhoto, kTokenOf, kTokenSlot};
            slot = 3;
            break;
        case TemplateKind::DomainConversion:
            if (extra_tokens.size() != 1)
                fail("invalid-template", "domain conversion takes exactly one tag");
            ids = {kTokenA, extra_tokens[0], kTokenOf, kTokenSlot};
            slot = 3;
            break;
        case TemplateKind::ObjectComposition: {
            if (extra_tokens.empty())
                fail("invalid-template", "object composition needs at least one tag");
            ids = {kTokenA, kTokenPhoto, kTokenOf, kTokenSlot, kTokenComma, extra_tokens[0]};
            for (std::size_t i = 1; i < extra_tokens.size(); ++i) {
                if (i >= 2) ids.push_back(kTokenComma);
                ids.push_back(kTokenAnd);
                ids.push_back(extra_tokens[i]);
            }
            slot = 3;
            break;
        }
        case TemplateKind::SentenceManipulation:
            if (extra_tokens.empty())
                fail("invalid-template", "sentence manipulation needs sentence tokens");
            ids = {kTokenA, kTokenPhoto, kTokenOf, kTokenSlot, kTokenComma};
            ids.insert(ids.end(), extra_tokens.begin(), extra_tokens.end());
            slot = 3;
            break;
    }
    if (pseudo_token && !slot)
        fail("missing-slot", "template has no slot for a pseudo token");

    PromptSequence seq;
    seq.token_ids = ids;
    seq.slot_index = slot;
    seq.token_embeddings.resize(static_cast<Index>(ids.size()), vocab.token_dim());
    for (std::size_t p = 0; p < ids.size(); ++p)
        seq.token_embeddings.row(static_cast<Index>(p)) = vocab.table().row(ids[p]);
    if (pseudo_token) {
        if (pseudo_token->size() != vocab.token_dim())
            fail("dimension-mismatch", "pseudo token dimension mismatch");
        seq.token_embeddings.row(*slot) = pseudo_token->transpose();
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Toy text encoder

template <typename Scalar>
struct TextWeights {
    VectorX<Scalar> position_weights;  // one positive weight per position
    MatrixX<Scalar> w1;                // hidden x token_dim
    VectorX<Scalar> b1;
    MatrixX<Scalar> w2;                // out x hidden
    VectorX<Scalar> b2;
};

struct ToyTextParams {
    Index token_dim = 0;
    Index hidden = 0;
    Index out = 0;
    Index max_positions = 64;
    std::uint64_t seed = 0;
    TextWeights<double> w;

    template <typename Scalar>
    TextWeights<Scalar> cast() const {
        if constexpr (std::is_same_v<Scalar, double>) return w;
        TextWeights<Scalar> c;
        c.position_weights = w.position_weights.cast<Scalar>();
        c.w1 = w.w1.cast<Scalar>();
        c.b1 = w.b1.cast<Scalar>();
        c.w2 = w.w2.cast<Scalar>();
        c.b2 = w.b2.cast<Scalar>();
        return c;
    }

    std::uint64_t hash() const {
        std::uint64_t h = hash_matrix(w.position_weights);
        h = hash_matrix(w.w1, h);
        h = hash_matrix(w.b1, h);
        h = hash_matrix(w.w2, h);
        h = hash_matrix(w.b2, h);
        return h;
    }
};

struct ToyTextOptions {
    bool uniform_positions = false;  // equal pooling weights (for symmetry tests)
    /// Draw w1 as a scaled orthogonal matrix with w2 = w1^T, so the encoder
    /// approximately preserves pooled directions. This is how a synthetic
    /// world realizes a text encoder that is pre-aligned with its image
    /// encoder; generic tests use the fully random default.
    bool near_isometry = false;
    Index max_positions = 64;
};

inline ToyTextParams make_toy_text_params(Index token_dim, Index hidden, Index out,
                                          std::uint64_t seed, ToyTextOptions opts = {}) {
    if (token_dim < 1 || hidden < 1 || out < 1)
        fail("invalid-argument", "encoder dimensions must be positive");
    if (opts.near_isometry && (hidden != token_dim || out != token_dim))
        fail("invalid-argument", "near-isometry mode needs token_dim == hidden == out");
    ToyTextParams p;
    p.token_dim = token_dim;
    p.hidden = hidden;
    p.out = out;
    p.max_positions = opts.max_positions;
    p.seed = seed;
    Rng rng(substream_seed(seed, "text-encoder"));
    p.w.position_weights.resize(opts.max_positions);
    for (Index i = 0; i < opts.max_positions; ++i)
        p.w.position_weights(i) = opts.uniform_positions ? 1.0 : rng.uniform(0.5, 1.5);
    if (opts.near_isometry) {
        const MatrixXd g = rng.normal_matrix(hidden, token_dim);
        const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(g).householderQ();
        p.w.w1 = 0.9 * q;
        p.w.w2 = p.w.w1.transpose();
        p.w.b1 = rng.normal_vector(hidden, 0.01);
        p.w.b2 = rng.normal_vector(out, 0.01);
    } else {
        p.w.w1 =
            rng.normal_matrix(hidden, token_dim, 1.0 / std::sqrt(static_cast<double>(token_dim)));
        p.w.b1 = rng.normal_vector(hidden, 0.1);
        p.w.w2 = rng.normal_matrix(out, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
        p.w.b2 = rng.normal_vector(out, 0.1);
    }
    return p;
}

namespace detail {

// s = W2 * tanh(W1 * pool + b1) + b2, pool = weighted mean of token rows.
template <typename Scalar>
VectorX<Scalar> text_forward_core(const MatrixX<Scalar>& token_rows,
                                  const TextWeights<Scalar>& w) {
    const Index len = token_rows.rows();
    const VectorX<Scalar> omega = w.position_weights.head(len);
    const VectorX<Scalar> pool = (token_rows.transpose() * omega) / omega.sum();
    const VectorX<Scalar> h = (w.w1 * pool + w.b1).array().tanh();
    return w.w2 * h + w.b2;
}

// d(upstream . s) / d(token row at `slot`).
template <typename Scalar>
VectorX<Scalar> text_slot_grad_core(const MatrixX<Scalar>& token_rows, Index slot,
                                    const VectorX<Scalar>& upstream,
                                    const TextWeights<Scalar>& w) {
    const Index len = token_rows.rows();
    const VectorX<Scalar> omega = w.position_weights.head(len);
    const VectorX<Scalar> pool = (token_rows.transpose() * omega) / omega.sum();
    const VectorX<Scalar> h = (w.w1 * pool + w.b1).array().tanh();
    const VectorX<Scalar> dh = (w.w2.transpose() * upstream).array() *
                               (Scalar(1) - h.array().square());
    return (omega(slot) / omega.sum()) * (w.w1.transpose() * dh);
}

}  // namespace detail

inline void check_sequence(const PromptSequence& seq, const ToyTextParams& params) {
    if (seq.length() < 1) fail("empty-prompt", "sequence must contain at least one token");
    if (seq.token_embeddings.cols() != params.token_dim)
        fail("dimension-mismatch", "sequence token dimension does not match encoder");
    if (seq.length() > params.max_positions)
        fail("dimension-mismatch", "sequence longer than the encoder's position table");
}

inline VectorXd text_forward(const PromptSequence& seq, const ToyTextParams& params) {
    check_sequence(seq, params);
    return detail::text_forward_core<double>(seq.token_embeddings, params.w);
}

/// Vector-Jacobian product of text_forward at the slot row: returns
/// d(upstream . s) / d(slot token embedding).
inline VectorXd text_input_grad(const PromptSequence& seq, const VectorXd& upstream,
                                const ToyTextParams& params) {
    check_sequence(seq, params);
    if (!seq.slot_index) fail("missing-slot", "sequence has no pseudo-token slot");
    if (upstream.size() != params.out)
        fail("dimension-mismatch", "upstream dimension does not match encoder output");
    return detail::text_slot_grad_core<double>(seq.token_embeddings, *seq.slot_index, upstream,
                                               params.w);
}

// ---------------------------------------------------------------------------
// Toy image encoder

/// One renderable item: a composition vector with its spatial extent.
struct DescriptorItem {
    VectorXd vec;  // concept-space contribution
    CropBox region;
};

/// Concept-composition description of an image; produced by the synthetic
/// world generator or an external exporter.
struct ImageDescriptor {
    std::string id;
    int width = 0;
    int height = 0;
    std::vector<DescriptorItem> items;
};

struct ToyImageParams {
    MatrixXd projection;  // d x concept_dim, frozen
    double sigma = 0.0;
    std::uint64_t seed = 0;

    Index d() const { return projection.rows(); }
    Index concept_dim() const { return projection.cols(); }

    std::uint64_t hash() const {
        std::uint64_t h = hash_matrix(projection);
        h = fnv1a64(&sigma, sizeof(sigma), h);
        return h;
    }
};

inline ToyImageParams make_toy_image_params(Index d, Index concept_dim, double sigma,
                                            std::uint64_t seed) {
    if (d < 1 || concept_dim < 1) fail("invalid-argument", "encoder dimensions must be positive");
    ToyImageParams p;
    Rng rng(substream_seed(seed, "image-encoder"));
    p.projection = rng.normal_matrix(d, concept_dim,
                                     1.0 / std::sqrt(static_cast<double>(concept_dim)));
    p.sigma = sigma;
    p.seed = seed;
    return p;
}

namespace detail {

inline VectorXd image_noise(const ToyImageParams& params, const std::string& image_id,
                            const CropBox* box) {
    std::uint64_t h = fnv1a64(image_id);
    if (box) {
        const int coords[4] = {box->x, box->y, box->w, box->h};
        h = fnv1a64(coords, sizeof(coords), h);
    }
    Rng rng(substream_seed(params.seed, "image-noise", h));
    return rng.normal_vector(params.d(), params.sigma);
}

inline VectorXd project_items(const ImageDescriptor& image, const ToyImageParams& params,
                              const CropBox* box) {
    VectorXd composite = VectorXd::Zero(params.concept_dim());
    for (const auto& item : image.items) {
        if (item.vec.size() != params.concept_dim())
            fail("dimension-mismatch", "descriptor item dimension does not match encoder");
        if (!box || box->intersects(item.region)) composite += item.vec;
    }
    VectorXd v = params.projection * composite;
    if (params.sigma > 0.0) v += image_noise(params, image.id, box);
    return v;
}

}  // namespace detail

inline VectorXd embed_image(const ImageDescriptor& image, const ToyImageParams& params) {
    return detail::project_items(image, params, nullptr);
}

/// Embeds the subset of the image visible through `box`: items whose region
/// has positive-area overlap with the box contribute.
inline VectorXd embed_crop(const ImageDescriptor& image, const CropBox& box,
                           const ToyImageParams& params) {
    if (!box.within(image.width, image.height))
        fail("out-of-bounds", "crop box outside image bounds on " + image.id);
    return detail::project_items(image, params, &box);
}

}  // namespace di2w
