#pragma once

#include "di2w/common.hpp"
#include "di2w/embedding_store.hpp"
#include "di2w/encoders.hpp"
#include "di2w/ptc.hpp"
#include "di2w/retrieval.hpp"

#include <nlohmann/json.hpp>

#include <map>

// Deterministic synthetic corpus: images are spatial compositions of
// concept vectors rendered in an additive style, captions name a strict
// subset of each image's concepts plus the style word, and ground-truth
// retrieval tasks are derived from the generating metadata.

namespace di2w {

struct WorldConfig {
    Index concept_count = 64;
    Index style_count = 4;
    Index image_count = 2000;
    int image_size = 224;
    int concepts_min = 2;
    int concepts_max = 4;
    double coverage = 0.6;  // fraction of an image's concepts its caption names
    double sigma = 0.01;
    std::uint64_t seed = 42;
    Index d = 32;
    Index token_dim = 0;    // 0 = d
    Index concept_dim = 0;  // 0 = max(8, d/2)
    Index text_hidden = 0;  // 0 = d
    double style_scale = 0.5;
    int crops_per_image = 4;
    CropConfig crop;
    /// Fraction of images that re-render an earlier image's concept set in a
    /// different style, so domain-conversion tasks have targets.
    double style_variants_fraction = 0.3;
    /// Reject duplicate concept sets (used by tests needing unique truths).
    bool unique_concept_sets = false;
    /// Give concept and style words token rows aligned with the image
    /// projection of their vectors, and seed the text encoder as a
    /// near-isometry. Models a pre-aligned encoder pair; without it the two
    /// embedding spaces are unrelated and captions carry no visual signal.
    bool aligned_vocabulary = true;

    Index token_dim_or_default() const { return token_dim > 0 ? token_dim : d; }
    Index concept_dim_or_default() const {
        return concept_dim > 0 ? concept_dim : std::max<Index>(8, d / 2);
    }
    Index text_hidden_or_default() const { return text_hidden > 0 ? text_hidden : d; }

    nlohmann::json to_json() const {
        return {{"concept_count", concept_count}, {"style_count", style_count},
                {"image_count", image_count},     {"image_size", image_size},
                {"concepts_min", concepts_min},   {"concepts_max", concepts_max},
                {"coverage", coverage},           {"sigma", sigma},
                {"seed", seed},                   {"d", d},
                {"token_dim", token_dim},         {"concept_dim", concept_dim},
                {"text_hidden", text_hidden},     {"style_scale", style_scale},
                {"crops_per_image", crops_per_image},
                {"crop_min", crop.crop_min},      {"crop_max", crop.crop_max},
                {"center_exclusion", crop.center_exclusion},
                {"style_variants_fraction", style_variants_fraction},
                {"unique_concept_sets", unique_concept_sets},
                {"aligned_vocabulary", aligned_vocabulary}};
    }

    static WorldConfig from_json(const nlohmann::json& j) {
        WorldConfig c;
        c.concept_count = j.at("concept_count");
        c.style_count = j.at("style_count");
        c.image_count = j.at("image_count");
        c.image_size = j.at("image_size");
        c.concepts_min = j.at("concepts_min");
        c.concepts_max = j.at("concepts_max");
        c.coverage = j.at("coverage");
        c.sigma = j.at("sigma");
        c.seed = j.at("seed");
        c.d = j.at("d");
        c.token_dim = j.at("token_dim");
        c.concept_dim = j.at("concept_dim");
        c.text_hidden = j.at("text_hidden");
        c.style_scale = j.at("style_scale");
        c.crops_per_image = j.at("crops_per_image");
        c.crop.crop_min = j.at("crop_min");
        c.crop.crop_max = j.at("crop_max");
        c.crop.center_exclusion = j.at("center_exclusion");
        c.style_variants_fraction = j.at("style_variants_fraction");
        c.unique_concept_sets = j.at("unique_concept_sets");
        c.aligned_vocabulary = j.at("aligned_vocabulary");
        return c;
    }
};

struct WorldImageMeta {
    std::string id;
    std::vector<int> concepts;       // concept indices, placement order
    int style = 0;
    std::vector<CropBox> regions;    // one region per concept, same order
    std::vector<std::uint32_t> caption_tokens;
};

struct SynthWorld {
    WorldConfig config;
    MatrixXd concept_vectors;  // concept_count x concept_dim
    MatrixXd style_vectors;    // style_count x concept_dim
    std::vector<ImageDescriptor> descriptors;
    std::vector<WorldImageMeta> images;
    Vocabulary vocab;
    ToyTextParams text_params;
    ToyImageParams image_params;
    StoreRecords store;
    std::vector<std::string> concept_words;
    std::vector<std::string> style_words;

    std::uint32_t concept_token(int concept_id) const {
        return kReservedTokens + static_cast<std::uint32_t>(config.style_count) +
               static_cast<std::uint32_t>(concept_id);
    }
    std::uint32_t style_token(int style) const {
        return kReservedTokens + static_cast<std::uint32_t>(style);
    }

    nlohmann::json metadata() const {
        nlohmann::json imgs = nlohmann::json::array();
        for (const auto& m : images) {
            nlohmann::json regions = nlohmann::json::array();
            for (const auto& r : m.regions) regions.push_back({r.x, r.y, r.w, r.h});
            imgs.push_back({{"id", m.id},
                            {"concepts", m.concepts},
                            {"style", m.style},
                            {"regions", regions},
                            {"caption_tokens", m.caption_tokens}});
        }
        return {{"world_config", config.to_json()},
                {"concept_words", concept_words},
                {"style_words", style_words},
                {"images", imgs}};
    }
};

namespace detail {

inline std::vector<std::string> default_concept_words(Index n) {
    static const char* base[] = {
        "dog",  "cat",   "tree",   "car",   "house",  "bird",   "fish",  "boat",
        "chair", "table", "lamp",   "clock", "flower", "horse",  "kite",  "drum",
        "bridge", "tower", "river", "cloud", "stone",  "leaf",   "wheel", "door",
        "window", "bottle", "cup",  "book",  "shoe",   "hat",    "bell",  "star"};
    std::vector<std::string> words;
    for (Index i = 0; i < n; ++i) {
        if (i < static_cast<Index>(std::size(base)))
            words.emplace_back(base[i]);
        else
            words.push_back("object_" + std::to_string(i));
    }
    return words;
}

inline std::vector<std::string> default_style_words(Index n) {
    static const char* base[] = {"cartoon", "sketch", "origami", "sculpture",
                                 "painting", "mosaic", "pixel", "neon"};
    std::vector<std::string> words;
    for (Index i = 0; i < n; ++i) {
        if (i < static_cast<Index>(std::size(base)))
            words.emplace_back(base[i]);
        else
            words.push_back("style_" + std::to_string(i));
    }
    return words;
}

}  // namespace detail

inline void validate_world_config(const WorldConfig& cfg) {
    if (cfg.concept_count < 1 || cfg.style_count < 1 || cfg.image_count < 1 || cfg.d < 1)
        fail("invalid-argument", "world counts must be at least 1");
    if (cfg.coverage <= 0.0 || cfg.coverage > 1.0)
        fail("invalid-argument", "caption coverage must lie in (0, 1]");
    if (cfg.concepts_min < 1 || cfg.concepts_max < cfg.concepts_min)
        fail("invalid-argument", "concepts-per-image range is empty");
    if (cfg.concepts_max > 8)
        fail("infeasible-layout",
             "at most 8 concepts fit the spatial grid (center cell is reserved)");
    if (cfg.concepts_max > cfg.concept_count)
        fail("infeasible-layout", "more concepts per image than concepts exist");
    if (cfg.image_size < 3)
        fail("infeasible-layout", "image too small for a 3x3 region grid");
}

/// Builds the world and its derived embedding store. Deterministic per seed.
inline SynthWorld generate_world(const WorldConfig& cfg) {
    validate_world_config(cfg);
    SynthWorld world;
    world.config = cfg;
    const Index concept_dim = cfg.concept_dim_or_default();
    const Index token_dim = cfg.token_dim_or_default();

    Rng concept_rng(substream_seed(cfg.seed, "world-concepts"));
    world.concept_vectors = concept_rng.normal_matrix(
        cfg.concept_count, concept_dim, 1.0 / std::sqrt(static_cast<double>(concept_dim)));
    Rng style_rng(substream_seed(cfg.seed, "world-styles"));
    world.style_vectors = style_rng.normal_matrix(
        cfg.style_count, concept_dim,
        cfg.style_scale / std::sqrt(static_cast<double>(concept_dim)));

    world.concept_words = detail::default_concept_words(cfg.concept_count);
    world.style_words = detail::default_style_words(cfg.style_count);
    std::vector<std::string> extra = world.style_words;
    extra.insert(extra.end(), world.concept_words.begin(), world.concept_words.end());
    world.image_params = make_toy_image_params(cfg.d, concept_dim, cfg.sigma, cfg.seed);

    if (cfg.aligned_vocabulary) {
        if (token_dim != cfg.d)
            fail("invalid-argument", "aligned vocabulary needs token_dim == d");
        // Reserved function words stay random; concept and style words sit at
        // the image-space projection of their vectors.
        Rng vrng(substream_seed(cfg.seed, "vocab-table"));
        MatrixXd table(static_cast<Index>(kReservedTokens) + cfg.style_count + cfg.concept_count,
                       token_dim);
        table.topRows(kReservedTokens) = vrng.normal_matrix(
            kReservedTokens, token_dim, 1.0 / std::sqrt(static_cast<double>(token_dim)));
        for (Index s = 0; s < cfg.style_count; ++s)
            table.row(kReservedTokens + s) =
                (world.image_params.projection * world.style_vectors.row(s).transpose())
                    .transpose();
        for (Index k = 0; k < cfg.concept_count; ++k)
            table.row(kReservedTokens + cfg.style_count + k) =
                (world.image_params.projection * world.concept_vectors.row(k).transpose())
                    .transpose();
        world.vocab = Vocabulary::from_table(extra, std::move(table));
        ToyTextOptions topt;
        topt.near_isometry = true;
        world.text_params =
            make_toy_text_params(token_dim, cfg.text_hidden_or_default(), cfg.d, cfg.seed, topt);
    } else {
        world.vocab = Vocabulary::build(extra, token_dim, cfg.seed);
        world.text_params =
            make_toy_text_params(token_dim, cfg.text_hidden_or_default(), cfg.d, cfg.seed);
    }

    const int cell = cfg.image_size / 3;
    // The 8 grid cells surrounding the center cell.
    const int cells[8][2] = {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}, {2, 2}};

    Rng layout_rng(substream_seed(cfg.seed, "world-layout"));
    Rng caption_rng(substream_seed(cfg.seed, "world-captions"));
    Rng crop_rng(substream_seed(cfg.seed, "world-crops"));

    std::map<std::vector<int>, std::vector<Index>> seen_sets;
    world.store.d = cfg.d;

    for (Index i = 0; i < cfg.image_count; ++i) {
        WorldImageMeta meta;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "img_%05lld", static_cast<long long>(i));
        meta.id = idbuf;

        // Concept set and style; optionally a restyled copy of an earlier set.
        bool variant = false;
        if (i > 0 && cfg.style_count > 1 &&
            layout_rng.uniform() < cfg.style_variants_fraction) {
            const Index j = static_cast<Index>(layout_rng.uniform_int(
                static_cast<std::uint64_t>(i)));
            const auto& src = world.images[static_cast<std::size_t>(j)];
            meta.concepts = src.concepts;
            std::sort(meta.concepts.begin(), meta.concepts.end());
            int style = static_cast<int>(layout_rng.uniform_int(cfg.style_count - 1));
            if (style >= src.style) ++style;
            meta.style = style;
            variant = true;
        }
        if (!variant) {
            for (int attempt = 0;; ++attempt) {
                const int k = cfg.concepts_min +
                              static_cast<int>(layout_rng.uniform_int(
                                  static_cast<std::uint64_t>(cfg.concepts_max - cfg.concepts_min + 1)));
                auto perm = layout_rng.permutation(cfg.concept_count);
                meta.concepts.assign(perm.begin(), perm.begin() + k);
                std::vector<int> key(meta.concepts.begin(), meta.concepts.end());
                std::sort(key.begin(), key.end());
                meta.concepts = key;
                if (!cfg.unique_concept_sets || !seen_sets.count(key)) break;
                if (attempt > 1000)
                    fail("infeasible-layout", "cannot draw enough distinct concept sets");
            }
            meta.style = static_cast<int>(layout_rng.uniform_int(cfg.style_count));
        }
        seen_sets[meta.concepts].push_back(i);

        // Spatial layout: each concept gets a distinct outer grid cell.
        auto cell_perm = layout_rng.permutation(8);
        for (std::size_t c = 0; c < meta.concepts.size(); ++c) {
            const auto* rc = cells[cell_perm[c]];
            meta.regions.push_back({rc[1] * cell, rc[0] * cell, cell, cell});
        }

        ImageDescriptor desc;
        desc.id = meta.id;
        desc.width = cfg.image_size;
        desc.height = cfg.image_size;
        const VectorXd style_vec = world.style_vectors.row(meta.style).transpose();
        for (std::size_t c = 0; c < meta.concepts.size(); ++c) {
            DescriptorItem item;
            item.vec = world.concept_vectors.row(meta.concepts[c]).transpose() + style_vec;
            item.region = meta.regions[c];
            desc.items.push_back(std::move(item));
        }

        // Caption: style word plus a strict subset of concepts (all of them
        // only when coverage is exactly 1).
        const int k = static_cast<int>(meta.concepts.size());
        int named = k;
        if (cfg.coverage < 1.0) {
            named = static_cast<int>(std::lround(cfg.coverage * k));
            named = std::clamp(named, 1, std::max(1, k - 1));
        }
        auto name_perm = caption_rng.permutation(k);
        meta.caption_tokens.push_back(world.style_token(meta.style));
        for (int c = 0; c < named; ++c) {
            if (c > 0) meta.caption_tokens.push_back(kTokenAnd);
            meta.caption_tokens.push_back(
                world.concept_token(meta.concepts[static_cast<std::size_t>(name_perm[c])]));
        }

        ImageRecord rec;
        rec.id = meta.id;
        rec.width = cfg.image_size;
        rec.height = cfg.image_size;
        rec.embedding = embed_image(desc, world.image_params).cast<float>();
        for (int c = 0; c < cfg.crops_per_image; ++c) {
            const CropBox box = sample_crop_box(cfg.image_size, cfg.image_size, crop_rng, cfg.crop);
            rec.crop_candidates.emplace_back(box,
                                             embed_crop(desc, box, world.image_params).cast<float>());
        }

        CaptionRecord cap;
        cap.image_id = meta.id;
        cap.tokens = meta.caption_tokens;
        PromptSequence cap_seq =
            build_prompt(TemplateKind::Caption, std::nullopt, cap.tokens, world.vocab);
        cap.sentence_embedding = text_forward(cap_seq, world.text_params).cast<float>();

        world.store.images.push_back(std::move(rec));
        world.store.captions.push_back(std::move(cap));
        world.descriptors.push_back(std::move(desc));
        world.images.push_back(std::move(meta));
    }
    validate_records(world.store, cfg.crop);
    return world;
}

/// Derives retrieval tasks with metadata-defined ground truth.
///   object composition:   reference = crop of one concept's region, tags =
///                         the remaining concepts, truth = images whose
///                         concept set contains them all.
///   domain conversion:    reference = the full image, tag = another style,
///                         truth = the same concept set in that style.
///   sentence manipulation: sentence names the image's set with one concept
///                         swapped, truth = images with exactly that set.
inline std::vector<EvalTask> make_eval_tasks(const SynthWorld& world, TemplateKind kind,
                                             Index max_tasks = 0) {
    const auto& cfg = world.config;
    std::map<std::vector<int>, std::vector<Index>> set_to_images;
    for (Index i = 0; i < static_cast<Index>(world.images.size()); ++i)
        set_to_images[world.images[static_cast<std::size_t>(i)].concepts].push_back(i);

    Rng rng(substream_seed(cfg.seed, "eval-tasks", static_cast<std::uint64_t>(kind)));
    std::vector<EvalTask> tasks;
    auto done = [&]() { return max_tasks > 0 && static_cast<Index>(tasks.size()) >= max_tasks; };

    for (Index i = 0; i < static_cast<Index>(world.images.size()) && !done(); ++i) {
        const auto& meta = world.images[static_cast<std::size_t>(i)];
        const auto& desc = world.descriptors[static_cast<std::size_t>(i)];
        if (kind == TemplateKind::ObjectComposition) {
            if (meta.concepts.size() < 2) continue;
            const auto pick = rng.uniform_int(meta.concepts.size());
            EvalTask task;
            task.group = "object_composition";
            task.tmpl.kind = kind;
            task.reference =
                embed_crop(desc, meta.regions[static_cast<std::size_t>(pick)], world.image_params);
            for (std::size_t c = 0; c < meta.concepts.size(); ++c)
                if (c != pick) task.tmpl.extra_tokens.push_back(world.concept_token(meta.concepts[c]));
            // Truth: every image whose set contains all of this image's concepts.
            for (const auto& [set, ids] : set_to_images) {
                if (std::includes(set.begin(), set.end(), meta.concepts.begin(),
                                  meta.concepts.end()))
                    for (Index j : ids)
                        task.truth_ids.push_back(world.images[static_cast<std::size_t>(j)].id);
            }
            tasks.push_back(std::move(task));
        } else if (kind == TemplateKind::DomainConversion) {
            std::vector<Index> options;
            for (Index j : set_to_images.at(meta.concepts))
                if (world.images[static_cast<std::size_t>(j)].style != meta.style)
                    options.push_back(j);
            if (options.empty()) continue;
            // All matching images in one chosen other style are the truth.
            const Index pick = options[rng.uniform_int(options.size())];
            const int target_style = world.images[static_cast<std::size_t>(pick)].style;
            EvalTask task;
            task.group = "domain_conversion";
            task.tmpl.kind = kind;
            task.tmpl.extra_tokens.push_back(world.style_token(target_style));
            task.reference = embed_image(desc, world.image_params);
            for (Index j : options)
                if (world.images[static_cast<std::size_t>(j)].style == target_style)
                    task.truth_ids.push_back(world.images[static_cast<std::size_t>(j)].id);
            tasks.push_back(std::move(task));
        } else if (kind == TemplateKind::SentenceManipulation) {
            std::vector<std::vector<int>> swaps;
            for (std::size_t drop = 0; drop < meta.concepts.size(); ++drop) {
                for (Index add = 0; add < cfg.concept_count; ++add) {
                    if (std::find(meta.concepts.begin(), meta.concepts.end(),
                                  static_cast<int>(add)) != meta.concepts.end())
                        continue;
                    std::vector<int> swapped = meta.concepts;
                    swapped[drop] = static_cast<int>(add);
                    std::sort(swapped.begin(), swapped.end());
                    if (set_to_images.count(swapped)) swaps.push_back(std::move(swapped));
                }
            }
            if (swaps.empty()) continue;
            const auto& target_set = swaps[rng.uniform_int(swaps.size())];
            EvalTask task;
            task.group = "sentence_manipulation";
            task.tmpl.kind = kind;
            for (std::size_t c = 0; c < target_set.size(); ++c) {
                if (c > 0) task.tmpl.extra_tokens.push_back(kTokenAnd);
                task.tmpl.extra_tokens.push_back(world.concept_token(target_set[c]));
            }
            task.reference = embed_image(desc, world.image_params);
            for (Index j : set_to_images.at(target_set))
                task.truth_ids.push_back(world.images[static_cast<std::size_t>(j)].id);
            tasks.push_back(std::move(task));
        } else {
            fail("invalid-template", "not an evaluation task kind");
        }
    }
    if (tasks.empty())
        fail("no-tasks", std::string("world contains no valid instances for ") + to_string(kind));
    return tasks;
}

}  // namespace di2w
