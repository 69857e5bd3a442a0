#pragma once

#include "di2w/common.hpp"
#include "di2w/embedding_store.hpp"

#include <algorithm>

// Pseudo triplet construction: sample a crop per image, score the batch,
// keep the pairs whose crop under-matches its caption while the original
// over-matches it, then stochastically swap the reference for a mined
// look-alike crop or original.

namespace di2w {

struct PtcConfig {
    CropConfig crop;
    double p_other_crop = 0.25;      // reference becomes the most similar other crop
    double p_other_original = 0.10;  // reference becomes the most similar other original
    bool cosine_text_image = false;  // cosine instead of raw dot for text-image scores
};

inline void validate_ptc_config(const PtcConfig& cfg) {
    if (cfg.crop.crop_min < 1 || cfg.crop.crop_max < cfg.crop.crop_min)
        fail("invalid-argument", "crop size range is empty");
    if (cfg.p_other_crop < 0 || cfg.p_other_original < 0 ||
        cfg.p_other_crop + cfg.p_other_original > 1.0)
        fail("invalid-argument", "mixture probabilities must be non-negative and sum to <= 1");
}

/// True when the box center lies strictly inside the middle-third rectangle
/// of the image (the region a sampled crop must avoid).
inline bool center_in_exclusion_zone(const CropBox& box, int width, int height) {
    const double cx = box.cx();
    const double cy = box.cy();
    return cx > width / 3.0 && cx < 2.0 * width / 3.0 &&
           cy > height / 3.0 && cy < 2.0 * height / 3.0;
}

inline bool crop_satisfies(const CropBox& box, int width, int height, const CropConfig& cfg) {
    if (!box.within(width, height)) return false;
    if (box.w < cfg.crop_min || box.w > cfg.crop_max) return false;
    if (box.h < cfg.crop_min || box.h > cfg.crop_max) return false;
    if (cfg.center_exclusion && center_in_exclusion_zone(box, width, height)) return false;
    return true;
}

/// Analytic feasibility of the sampling problem: some in-range box placement
/// must exist whose center escapes the exclusion zone.
inline bool crop_feasible(int width, int height, const CropConfig& cfg) {
    if (width < cfg.crop_min || height < cfg.crop_min) return false;
    if (!cfg.center_exclusion) return true;
    // A box of width w can place its center at or left of width/3 iff
    // w/2 <= width/3; the smallest legal box is the easiest to place.
    return cfg.crop_min <= 2.0 * width / 3.0 || cfg.crop_min <= 2.0 * height / 3.0;
}

/// Uniform rejection sampling over the feasible (w, h, x, y) set.
inline CropBox sample_crop_box(int width, int height, Rng& rng, const CropConfig& cfg) {
    if (!crop_feasible(width, height, cfg))
        fail("infeasible-crop", "no crop of size [" + std::to_string(cfg.crop_min) + ", " +
                                    std::to_string(cfg.crop_max) + "] fits a " +
                                    std::to_string(width) + "x" + std::to_string(height) +
                                    " image under the center-exclusion rule");
    const int whi = std::min(cfg.crop_max, width);
    const int hhi = std::min(cfg.crop_max, height);
    for (int iter = 0; iter < 1000000; ++iter) {
        CropBox box;
        box.w = cfg.crop_min + static_cast<int>(rng.uniform_int(whi - cfg.crop_min + 1));
        box.h = cfg.crop_min + static_cast<int>(rng.uniform_int(hhi - cfg.crop_min + 1));
        box.x = static_cast<int>(rng.uniform_int(width - box.w + 1));
        box.y = static_cast<int>(rng.uniform_int(height - box.h + 1));
        if (!cfg.center_exclusion || !center_in_exclusion_zone(box, width, height)) return box;
    }
    fail("sampling-stalled", "crop rejection sampling did not terminate");
}

/// Arithmetic mean computed relative to the first entry, so a constant
/// vector's mean equals that constant exactly (the selection rule below
/// compares strictly against it).
inline double shifted_mean(const VectorXd& v) {
    double acc = 0.0;
    for (Index i = 0; i < v.size(); ++i) acc += v(i) - v(0);
    return v(0) + acc / static_cast<double>(v.size());
}

/// Batch similarity table. Text-image scores are raw dot products by
/// default; image-image matrices are always cosine.
struct BatchSim {
    VectorXd sim_t2vc;    // caption i vs its crop
    VectorXd sim_t2v;     // caption i vs its original
    MatrixXd sim_vc2vc;   // crop vs crop, cosine
    MatrixXd sim_v2v;     // original vs original, cosine
    double theta_t2vc = 0.0;
    double theta_t2v = 0.0;

    Index batch_size() const { return sim_t2vc.size(); }
};

inline BatchSim compute_batch_sims(const MatrixXd& captions, const MatrixXd& originals,
                                   const MatrixXd& crops, bool cosine_text_image = false) {
    const Index m = captions.rows();
    if (m < 2) fail("batch-too-small", "batch statistics need at least 2 samples");
    if (originals.rows() != m || crops.rows() != m || originals.cols() != captions.cols() ||
        crops.cols() != captions.cols())
        fail("dimension-mismatch", "caption/original/crop matrices disagree in shape");

    BatchSim s;
    if (cosine_text_image) {
        const MatrixXd t_hat = l2_normalize_rows(captions);
        s.sim_t2vc = (t_hat.array() * l2_normalize_rows(crops).array()).rowwise().sum();
        s.sim_t2v = (t_hat.array() * l2_normalize_rows(originals).array()).rowwise().sum();
    } else {
        s.sim_t2vc = (captions.array() * crops.array()).rowwise().sum();
        s.sim_t2v = (captions.array() * originals.array()).rowwise().sum();
    }
    const MatrixXd vc_hat = l2_normalize_rows(crops);
    const MatrixXd v_hat = l2_normalize_rows(originals);
    s.sim_vc2vc = vc_hat * vc_hat.transpose();
    s.sim_v2v = v_hat * v_hat.transpose();
    s.theta_t2vc = shifted_mean(s.sim_t2vc);
    s.theta_t2v = shifted_mean(s.sim_t2v);
    return s;
}

/// Indices whose crop scores strictly below the batch-mean crop threshold
/// while the original scores strictly above the batch-mean original
/// threshold. May be empty.
inline std::vector<Index> filter_triplets(const BatchSim& sims) {
    std::vector<Index> keep;
    for (Index i = 0; i < sims.batch_size(); ++i) {
        if (sims.sim_t2vc(i) < sims.theta_t2vc && sims.sim_t2v(i) > sims.theta_t2v)
            keep.push_back(i);
    }
    return keep;
}

enum class Provenance { SelfCrop, OtherCrop, OtherOriginal };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::SelfCrop: return "SELF_CROP";
        case Provenance::OtherCrop: return "OTHER_CROP";
        case Provenance::OtherOriginal: return "OTHER_ORIGINAL";
    }
    return "?";
}

struct MinedReference {
    VectorXd embedding;
    Provenance provenance = Provenance::SelfCrop;
    Index source_index = -1;
};

namespace detail {

// Argmax over row i excluding the diagonal; ties go to the lowest index.
inline Index argmax_other(const MatrixXd& sim, Index i) {
    Index best = -1;
    double best_val = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < sim.cols(); ++j) {
        if (j == i) continue;
        if (sim(i, j) > best_val) {
            best_val = sim(i, j);
            best = j;
        }
    }
    return best;
}

}  // namespace detail

/// Picks the reference embedding for filtered index i given one uniform draw
/// x in [0, 1): the most similar other crop with probability p_other_crop,
/// the most similar other original with probability p_other_original, and
/// the sample's own crop otherwise.
inline MinedReference mine_reference(Index i, const BatchSim& sims, const MatrixXd& crops,
                                     const MatrixXd& originals, double x, const PtcConfig& cfg) {
    validate_ptc_config(cfg);
    MinedReference ref;
    if (x < cfg.p_other_crop) {
        ref.source_index = detail::argmax_other(sims.sim_vc2vc, i);
        ref.embedding = crops.row(ref.source_index).transpose();
        ref.provenance = Provenance::OtherCrop;
    } else if (x < cfg.p_other_crop + cfg.p_other_original) {
        ref.source_index = detail::argmax_other(sims.sim_v2v, i);
        ref.embedding = originals.row(ref.source_index).transpose();
        ref.provenance = Provenance::OtherOriginal;
    } else {
        ref.source_index = i;
        ref.embedding = crops.row(i).transpose();
        ref.provenance = Provenance::SelfCrop;
    }
    return ref;
}

struct PseudoTriplet {
    VectorXd reference;
    std::vector<std::uint32_t> caption_tokens;
    VectorXd caption_embedding;
    VectorXd target;
    Provenance provenance = Provenance::SelfCrop;
    std::string reference_source_id;
    std::string target_id;
};

struct BatchItem {
    const ImageRecord* image = nullptr;
    const CaptionRecord* caption = nullptr;
};

/// Runs the full construction for one batch: per-image crop selection,
/// similarity table, caption-consistency filter, reference mining. Draw
/// order is fixed (crop choices in batch order, then mixture draws in
/// ascending filtered order) so results are reproducible from the rng state.
inline std::vector<PseudoTriplet> construct_pseudo_triplets(const std::vector<BatchItem>& batch,
                                                            Rng& rng, const PtcConfig& cfg) {
    validate_ptc_config(cfg);
    const Index m = static_cast<Index>(batch.size());
    if (m < 2) fail("batch-too-small", "triplet construction needs a batch of at least 2");
    const Index d = batch.front().image->embedding.size();

    MatrixXd captions(m, d), originals(m, d), crops(m, d);
    std::vector<Index> crop_choice(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
        const auto& item = batch[static_cast<std::size_t>(i)];
        if (!item.image || !item.caption) fail("invalid-record", "batch item missing a record");
        std::vector<Index> eligible;
        for (Index c = 0; c < static_cast<Index>(item.image->crop_candidates.size()); ++c) {
            const auto& box = item.image->crop_candidates[static_cast<std::size_t>(c)].first;
            if (crop_satisfies(box, item.image->width, item.image->height, cfg.crop))
                eligible.push_back(c);
        }
        if (eligible.empty())
            fail("no-feasible-crop", "image " + item.image->id +
                                         " has no crop candidate inside the configured range");
        const Index pick = eligible[rng.uniform_int(eligible.size())];
        crop_choice[static_cast<std::size_t>(i)] = pick;
        captions.row(i) = item.caption->sentence_embedding.cast<double>().transpose();
        originals.row(i) = item.image->embedding.cast<double>().transpose();
        crops.row(i) = item.image->crop_candidates[static_cast<std::size_t>(pick)]
                           .second.cast<double>()
                           .transpose();
    }

    const BatchSim sims = compute_batch_sims(captions, originals, crops, cfg.cosine_text_image);
    std::vector<PseudoTriplet> out;
    for (Index i : filter_triplets(sims)) {
        const double x = rng.uniform();
        const MinedReference mined = mine_reference(i, sims, crops, originals, x, cfg);
        PseudoTriplet t;
        t.reference = mined.embedding;
        t.caption_tokens = batch[static_cast<std::size_t>(i)].caption->tokens;
        t.caption_embedding = captions.row(i).transpose();
        t.target = originals.row(i).transpose();
        t.provenance = mined.provenance;
        t.reference_source_id = batch[static_cast<std::size_t>(mined.source_index)].image->id;
        t.target_id = batch[static_cast<std::size_t>(i)].image->id;
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace di2w
