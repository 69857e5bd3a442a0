// Acceptance suite: end-to-end checks with pinned tolerances, one PASS/FAIL
// line per criterion. Exit status is the number of failed criteria.

#include "di2w/retrieval.hpp"
#include "di2w/synth_world.hpp"
#include "di2w/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

using namespace di2w;

namespace {

int g_failures = 0;

void criterion(int number, const std::string& name, const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
        body();
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  criterion %2d: %s (%.2fs)%s%s\n", ok ? "PASS" : "FAIL", number,
                name.c_str(), secs, detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<PseudoTriplet> random_triplets(Index d, Index m, const Vocabulary& vocab,
                                           std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PseudoTriplet> out;
    for (Index i = 0; i < m; ++i) {
        PseudoTriplet t;
        t.reference = rng.normal_vector(d);
        t.target = rng.normal_vector(d);
        t.caption_embedding = rng.normal_vector(d);
        const std::size_t n = 1 + rng.uniform_int(3);
        for (std::size_t k = 0; k < n; ++k)
            t.caption_tokens.push_back(static_cast<std::uint32_t>(rng.uniform_int(vocab.size())));
        out.push_back(std::move(t));
    }
    return out;
}

WorldConfig reference_world_config(std::uint64_t seed) {
    WorldConfig cfg;
    cfg.d = 32;
    cfg.concept_count = 64;
    cfg.style_count = 4;
    cfg.image_count = 2000;
    cfg.coverage = 0.6;
    cfg.seed = seed;
    return cfg;
}

TrainConfig reference_train_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.total_steps = 200;
    cfg.warmup_steps = 20;
    cfg.learning_rate = 1e-2;
    cfg.tau = 10.0;
    cfg.seed = seed;
    return cfg;
}

// --------------------------------------------------------------------------

void gradient_correctness() {
    const Index d = 16, m = 8;
    const Vocabulary vocab = Vocabulary::build({"dog", "cat", "tree", "car"}, d, 1);
    const ToyTextParams text = make_toy_text_params(d, d, d, 2);
    const MappingParams params = init_mapping({d, d, d}, 3);
    const auto triplets = random_triplets(d, m, vocab, 4);

    const auto t0 = std::chrono::steady_clock::now();
    const std::tuple<bool, bool, const char*> modes[] = {
        {true, false, "compose"}, {false, true, "align"}, {true, true, "total"}};
    for (const auto& [use_compose, use_align, label] : modes) {
        LossConfig cfg;
        cfg.use_compose = use_compose;
        cfg.use_align = use_align;
        FiniteDiffOptions opts;
        opts.h = 1e-5;
        opts.tolerance = 1e-5;
        const auto report = finite_diff_check(params, triplets, vocab, text, cfg, opts);
        require(report.coords_checked == params.theta().size(),
                "expected every coordinate checked");
        require(report.pass, std::string(label) + " max rel err " +
                                 std::to_string(report.max_rel_err) + " exceeds 1e-5");
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs < 10.0, "gradient check took " + std::to_string(secs) + "s, budget 10s");

    // Negative control: corrupting the largest-gradient coordinate must fail.
    LossConfig cfg;
    const auto [bd, grads] = total_loss_and_grads(params, triplets, vocab, text, cfg);
    Index worst = 0;
    grads.cwiseAbs().maxCoeff(&worst);
    FiniteDiffOptions opts;
    opts.corrupt_coord = worst;
    require(!finite_diff_check(params, triplets, vocab, text, cfg, opts).pass,
            "corrupted gradient was not detected");
}

void filter_oracle_equivalence() {
    Rng rng(11);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const Index m = 2 + static_cast<Index>(rng.uniform_int(15));
        const Index d = 2 + static_cast<Index>(rng.uniform_int(12));
        const BatchSim s = compute_batch_sims(rng.normal_matrix(m, d), rng.normal_matrix(m, d),
                                              rng.normal_matrix(m, d));
        // Brute-force reimplementation of the selection rule.
        double mean_c = 0, mean_v = 0;
        for (Index i = 0; i < m; ++i) {
            mean_c += s.sim_t2vc(i);
            mean_v += s.sim_t2v(i);
        }
        mean_c /= static_cast<double>(m);
        mean_v /= static_cast<double>(m);
        std::vector<Index> expected;
        for (Index i = 0; i < m; ++i)
            if (s.sim_t2vc(i) < mean_c && s.sim_t2v(i) > mean_v) expected.push_back(i);
        if (filter_triplets(s) != expected) ++mismatches;
    }
    require(mismatches == 0, std::to_string(mismatches) + " mismatching batches");
}

void mixture_law() {
    Rng rng(13);
    const Index m = 8, d = 6;
    const BatchSim s = compute_batch_sims(rng.normal_matrix(m, d), rng.normal_matrix(m, d),
                                          rng.normal_matrix(m, d));
    const MatrixXd V = rng.normal_matrix(m, d);
    const MatrixXd Vc = rng.normal_matrix(m, d);
    const PtcConfig cfg;
    long self = 0, other_crop = 0, other_orig = 0;
    const long draws = 100000;
    Rng xrng(17);
    for (long k = 0; k < draws; ++k) {
        const Index i = static_cast<Index>(k % m);
        const auto ref = mine_reference(i, s, Vc, V, xrng.uniform(), cfg);
        switch (ref.provenance) {
            case Provenance::SelfCrop: ++self; break;
            case Provenance::OtherCrop: ++other_crop; break;
            case Provenance::OtherOriginal: ++other_orig; break;
        }
        if (ref.provenance != Provenance::SelfCrop)
            require(ref.source_index != i, "argmax selected the query row itself");
        else
            require(ref.source_index == i, "self branch must keep the own crop");
    }
    const double n = static_cast<double>(draws);
    require(std::abs(self / n - 0.65) <= 0.01, "self-crop frequency off: " +
                                                   std::to_string(self / n));
    require(std::abs(other_crop / n - 0.25) <= 0.01,
            "other-crop frequency off: " + std::to_string(other_crop / n));
    require(std::abs(other_orig / n - 0.10) <= 0.01,
            "other-original frequency off: " + std::to_string(other_orig / n));
}

void crop_constraints() {
    CropConfig cfg;
    Rng rng(19);
    for (int i = 0; i < 10000; ++i) {
        const CropBox box = sample_crop_box(224, 224, rng, cfg);
        require(box.w >= 32 && box.w <= 64 && box.h >= 32 && box.h <= 64,
                "sampled box violates the size range");
        require(box.within(224, 224), "sampled box outside image bounds");
        require(!center_in_exclusion_zone(box, 224, 224),
                "sampled box center inside the excluded region");
    }
    bool threw = false;
    try {
        sample_crop_box(40, 40, rng, cfg);
    } catch (const Error& e) {
        threw = std::string(e.code()) == "infeasible-crop";
    }
    require(threw, "infeasible geometry did not raise the designated error");
}

void contrastive_closed_forms() {
    const MatrixXd eye4 = MatrixXd::Identity(4, 4);
    const auto matched = contrastive_pair_loss<double>(eye4, eye4, 1.0);
    require(std::abs(matched.loss - std::log1p(3.0 * std::exp(-1.0))) <= 1e-9,
            "m=4 tau=1 loss " + std::to_string(matched.loss));

    MatrixXd one = MatrixXd::Zero(1, 4);
    one(0, 0) = 1.0;
    require(contrastive_pair_loss<double>(one, one, 1.0).loss == 0.0, "m=1 loss must be 0");

    Rng rng(23);
    const MatrixXd a = l2_normalize_rows<double>(rng.normal_matrix(8, 6));
    const MatrixXd b = l2_normalize_rows<double>(rng.normal_matrix(8, 6));
    const auto limit = contrastive_pair_loss<double>(a, b, 1e-8);
    require(std::abs(limit.loss - std::log(8.0)) <= 1e-6,
            "tau->0 limit " + std::to_string(limit.loss));
}

void recall_oracle_equivalence() {
    Rng rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        const Index gallery_size = 2 + static_cast<Index>(rng.uniform_int(499));
        const std::size_t n_queries = 1 + rng.uniform_int(200);
        const Index d = 4 + static_cast<Index>(rng.uniform_int(12));
        const MatrixXd gallery = rng.normal_matrix(gallery_size, d);

        std::vector<std::vector<Index>> rankings(n_queries), truths(n_queries);
        for (std::size_t q = 0; q < n_queries; ++q) {
            const VectorXd query = rng.normal_vector(d);
            rankings[q] = rank_candidates(query, gallery);
            // Naive sort oracle.
            std::vector<std::pair<double, Index>> scored;
            for (Index i = 0; i < gallery_size; ++i)
                scored.emplace_back(
                    gallery.row(i).dot(query) / (gallery.row(i).norm() * query.norm()), i);
            std::stable_sort(scored.begin(), scored.end(),
                             [](const auto& x, const auto& y) { return x.first > y.first; });
            for (Index r = 0; r < gallery_size; ++r)
                require(rankings[q][static_cast<std::size_t>(r)] ==
                            scored[static_cast<std::size_t>(r)].second,
                        "ranking disagrees with the sort oracle");
            const std::size_t nt = 1 + rng.uniform_int(3);
            for (std::size_t t = 0; t < nt; ++t)
                truths[q].push_back(static_cast<Index>(rng.uniform_int(gallery_size)));
        }
        double prev = 0.0;
        for (Index k : {1, 5, 10, 50}) {
            const double got = recall_at_k(rankings, truths, k);
            // Counting oracle.
            int hits = 0;
            for (std::size_t q = 0; q < n_queries; ++q) {
                const Index kq = std::min<Index>(k, gallery_size);
                const std::set<Index> truth(truths[q].begin(), truths[q].end());
                bool hit = false;
                for (Index r = 0; r < kq && !hit; ++r)
                    hit = truth.count(rankings[q][static_cast<std::size_t>(r)]) > 0;
                hits += hit ? 1 : 0;
            }
            require(got == static_cast<double>(hits) / static_cast<double>(n_queries),
                    "recall disagrees with the counting oracle");
            require(got >= prev, "recall not monotone in K");
            prev = got;
        }
    }
}

void ablation_direction() {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
        const SynthWorld world = generate_world(reference_world_config(seed));
        const Gallery gallery = gallery_from_store(world.store);
        const auto tasks = make_eval_tasks(world, TemplateKind::ObjectComposition, 400);
        const auto r1 = [&](const MappingParams& p) {
            return evaluate(p, tasks, gallery, world.vocab, world.text_params, {1})
                .value("object_composition", 1);
        };

        const TrainConfig cfg = reference_train_config(seed);
        const MappingParams untrained = init_mapping({32, 32, 32}, seed);
        const double recall_untrained = r1(untrained);

        const TrainResult full = train(world.store, world.vocab, world.text_params, cfg,
                                       init_mapping({32, 32, 32}, seed));
        const double recall_full = r1(full.params);

        TrainConfig no_compose = cfg;
        no_compose.use_compose = false;
        const TrainResult ablated = train(world.store, world.vocab, world.text_params,
                                          no_compose, init_mapping({32, 32, 32}, seed));
        const double recall_ablated = r1(ablated.params);

        std::printf("      seed %llu: full=%.4f  w/o-compose=%.4f  untrained=%.4f\n",
                    static_cast<unsigned long long>(seed), recall_full, recall_ablated,
                    recall_untrained);
        require(recall_full > recall_ablated,
                "full objective did not beat the compose-ablated run");
        require(recall_full > recall_untrained,
                "full objective did not beat the untrained baseline");
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs < 300.0, "ablation experiment took " + std::to_string(secs) + "s, budget 300s");
}

void training_determinism() {
    WorldConfig wc = reference_world_config(7);
    wc.image_count = 400;
    const SynthWorld world = generate_world(wc);
    TrainConfig cfg = reference_train_config(7);
    cfg.total_steps = 60;

    auto run = [&](const std::string& tag) {
        const TrainResult r = train(world.store, world.vocab, world.text_params, cfg,
                                    init_mapping({32, 32, 32}, cfg.seed));
        const auto path = temp_path("di2w_accept_" + tag + ".ckpt");
        write_checkpoint(path, r.params, r.opt);
        std::ifstream in(path, std::ios::binary);
        std::stringstream bytes;
        bytes << in.rdbuf();
        std::string log;
        for (const auto& line : r.log_lines) log += line + "\n";
        return std::pair<std::string, std::string>(bytes.str(), log);
    };
    const auto a = run("a");
    const auto b = run("b");
    require(a.first == b.first, "checkpoints differ between identical runs");
    require(!a.first.empty(), "checkpoint file is empty");
    require(a.second == b.second, "loss logs differ between identical runs");
}

void store_integrity() {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        StoreRecords records;
        records.d = 1 + static_cast<Index>(rng.uniform_int(24));
        const int n = 1 + static_cast<int>(rng.uniform_int(4));
        for (int i = 0; i < n; ++i) {
            ImageRecord img;
            img.id = "img_" + std::to_string(i);
            img.width = img.height = 224;
            img.embedding = rng.normal_vector(records.d).cast<float>();
            const int ncand = static_cast<int>(rng.uniform_int(3));
            for (int c = 0; c < ncand; ++c)
                img.crop_candidates.emplace_back(
                    CropBox{static_cast<int>(rng.uniform_int(150)),
                            static_cast<int>(rng.uniform_int(150)),
                            32 + static_cast<int>(rng.uniform_int(33)),
                            32 + static_cast<int>(rng.uniform_int(33))},
                    rng.normal_vector(records.d).cast<float>());
            records.images.push_back(std::move(img));
            if (rng.uniform() < 0.7) {
                CaptionRecord cap;
                cap.image_id = "img_" + std::to_string(i);
                cap.tokens = {static_cast<std::uint32_t>(rng.uniform_int(50))};
                cap.sentence_embedding = rng.normal_vector(records.d).cast<float>();
                records.captions.push_back(std::move(cap));
            }
        }
        const auto bytes = serialize_store(records);
        const StoreRecords back = parse_store(bytes);
        require(serialize_store(back) == bytes, "round-trip bytes differ");
    }

    // Corruptions map to their designated errors.
    StoreRecords records;
    records.d = 4;
    ImageRecord img;
    img.id = "x";
    img.width = img.height = 224;
    img.embedding = VectorXf::Ones(4);
    records.images.push_back(img);
    auto bytes = serialize_store(records);

    auto expect_code = [&](std::vector<std::uint8_t> data, const std::string& code) {
        try {
            parse_store(std::move(data));
        } catch (const Error& e) {
            require(e.code() == code, "expected " + code + ", got " + e.code());
            return;
        }
        throw std::runtime_error("corruption not rejected: " + code);
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    expect_code(bad_magic, "bad-magic");
    auto truncated = bytes;
    truncated.pop_back();
    expect_code(truncated, "truncated");
    auto nan_payload = bytes;
    const std::size_t off = 4 + 2 + 4 + 4 + 1 + 4 + 1 + 4 + 4;  // first embedding float
    const std::uint32_t nan_bits = 0x7fc00000u;
    for (int i = 0; i < 4; ++i)
        nan_payload[off + i] = static_cast<std::uint8_t>(nan_bits >> (8 * i));
    expect_code(nan_payload, "non-finite");
}

void frozen_encoders_invariant() {
    WorldConfig wc = reference_world_config(3);
    wc.image_count = 400;
    const SynthWorld world = generate_world(wc);
    const std::uint64_t vocab_hash = world.vocab.hash();
    const std::uint64_t text_hash = world.text_params.hash();
    const std::uint64_t image_hash = world.image_params.hash();

    TrainConfig cfg = reference_train_config(3);
    cfg.total_steps = 80;
    MappingParams init = init_mapping({32, 32, 32}, cfg.seed);
    const std::uint64_t init_hash = init.hash();
    const TrainResult result =
        train(world.store, world.vocab, world.text_params, cfg, std::move(init));

    require(world.vocab.hash() == vocab_hash, "vocabulary changed during training");
    require(world.text_params.hash() == text_hash, "text encoder changed during training");
    require(world.image_params.hash() == image_hash, "image encoder changed during training");
    require(result.params.hash() != init_hash, "mapping parameters did not change");
}

}  // namespace

int main() {
    std::printf("acceptance suite\n================\n");
    criterion(1, "gradient correctness (d=16, m=8, h=1e-5, rel err <= 1e-5)",
              gradient_correctness);
    criterion(2, "selection rule matches brute force on 200 random batches",
              filter_oracle_equivalence);
    criterion(3, "mining mixture frequencies (0.65/0.25/0.10 within 0.01)", mixture_law);
    criterion(4, "crop size range and center exclusion on 10000 samples", crop_constraints);
    criterion(5, "contrastive closed forms (log(1+3e^-1), m=1, tau->0)",
              contrastive_closed_forms);
    criterion(6, "ranking and recall match naive oracles on 100 instances",
              recall_oracle_equivalence);
    criterion(7, "ablation direction on the reference world (seeds 0,1,2)", ablation_direction);
    criterion(8, "bitwise-identical checkpoints and logs across reruns", training_determinism);
    criterion(9, "1000 store round-trips and corruption rejection", store_integrity);
    criterion(10, "frozen encoders unchanged by a full training run", frozen_encoders_invariant);

    std::printf("================\n%d of 10 criteria passed\n", 10 - g_failures);
    return g_failures;
}
