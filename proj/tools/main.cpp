// Command-line front end: synthetic corpus generation, external embedding
// ingestion, triplet construction, mapper training, retrieval evaluation,
// gradient checking, and the crop-range sweep.

#include "di2w/retrieval.hpp"
#include "di2w/synth_world.hpp"
#include "di2w/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace di2w;

namespace {

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("io-error", "cannot hash missing file: " + path.string());
    std::uint64_t h = kFnvOffset;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return "fnv1a64:" + hex64(h);
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("io-error", "cannot open for writing: " + path.string());
    out << content;
    if (!out) fail("io-error", "write failed: " + path.string());
}

std::string config_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

/// Records every artifact a command produced, with content hashes.
struct RunManifest {
    fs::path dir;
    json data;

    RunManifest(fs::path out_dir, const std::string& command, const json& config)
        : dir(std::move(out_dir)) {
        fs::create_directories(dir);
        data["command"] = command;
        data["config"] = config;
        data["config_hash"] = config_hash(config);
        data["outputs"] = json::object();
    }

    void add(const fs::path& path) {
        data["outputs"][fs::relative(path, dir).string()] = file_hash(path);
    }

    void finish() {
        write_text_file(dir / "run_manifest.json", data.dump(2) + "\n");
    }
};

struct WorldFlags {
    WorldConfig cfg;

    void attach(CLI::App* cmd) {
        cmd->add_option("--d", cfg.d, "embedding dimension")->capture_default_str();
        cmd->add_option("--concepts", cfg.concept_count, "number of concepts")
            ->capture_default_str();
        cmd->add_option("--styles", cfg.style_count, "number of styles")->capture_default_str();
        cmd->add_option("--images", cfg.image_count, "number of images")->capture_default_str();
        cmd->add_option("--image-size", cfg.image_size, "image side length in pixels")
            ->capture_default_str();
        cmd->add_option("--concepts-min", cfg.concepts_min, "min concepts per image")
            ->capture_default_str();
        cmd->add_option("--concepts-max", cfg.concepts_max, "max concepts per image")
            ->capture_default_str();
        cmd->add_option("--coverage", cfg.coverage,
                        "fraction of an image's concepts its caption names")
            ->capture_default_str();
        cmd->add_option("--sigma", cfg.sigma, "embedding noise scale")->capture_default_str();
        cmd->add_option("--crops-per-image", cfg.crops_per_image,
                        "stored crop candidates per image")
            ->capture_default_str();
        cmd->add_option("--crop-min", cfg.crop.crop_min, "min crop side")->capture_default_str();
        cmd->add_option("--crop-max", cfg.crop.crop_max, "max crop side")->capture_default_str();
        cmd->add_flag("--no-center-exclusion",
                      [this](std::size_t) { cfg.crop.center_exclusion = false; },
                      "allow crop centers inside the middle third");
        cmd->add_option("--style-variants", cfg.style_variants_fraction,
                        "fraction of images restyling an earlier concept set")
            ->capture_default_str();
        cmd->add_flag("--unaligned-vocabulary",
                      [this](std::size_t) { cfg.aligned_vocabulary = false; },
                      "use a random token table unrelated to the image space");
    }
};

struct TrainFlags {
    TrainConfig cfg;

    void attach(CLI::App* cmd, bool with_crop_range = true) {
        cmd->add_option("--lr", cfg.learning_rate, "base learning rate")->capture_default_str();
        cmd->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay")
            ->capture_default_str();
        cmd->add_option("--warmup", cfg.warmup_steps, "linear warmup steps")
            ->capture_default_str();
        cmd->add_option("--batch-size", cfg.batch_size, "contrastive batch size")
            ->capture_default_str();
        cmd->add_option("--tau", cfg.tau, "contrastive temperature")->capture_default_str();
        cmd->add_option("--steps", cfg.total_steps, "total training steps")
            ->capture_default_str();
        if (with_crop_range) {
            cmd->add_option("--crop-min", cfg.crop_min, "min eligible crop side")
                ->capture_default_str();
            cmd->add_option("--crop-max", cfg.crop_max, "max eligible crop side")
                ->capture_default_str();
        }
        cmd->add_option("--p-other-crop", cfg.p_other_crop,
                        "probability of mining another image's crop")
            ->capture_default_str();
        cmd->add_option("--p-other-original", cfg.p_other_original,
                        "probability of mining another original")
            ->capture_default_str();
        cmd->add_option("--hidden", cfg.hidden_dim, "mapper hidden width (0 = d)")
            ->capture_default_str();
        cmd->add_option("--checkpoint-interval", cfg.checkpoint_interval,
                        "periodic checkpoint interval (0 = final only)")
            ->capture_default_str();
        cmd->add_flag("--no-compose-loss",
                      [this](std::size_t) { cfg.use_compose = false; },
                      "train without the caption-conditioned objective");
        cmd->add_flag("--no-align-loss", [this](std::size_t) { cfg.use_align = false; },
                      "train without the caption-free objective");
        cmd->add_flag("--align-with-target",
                      [this](std::size_t) { cfg.align_with_target = true; },
                      "pair the caption-free prompt with targets instead of references");
        cmd->add_flag("--connective-that",
                      [this](std::size_t) { cfg.connective = Connective::That; },
                      "join the training prompt with 'that' instead of a comma");
        cmd->add_flag("--cosine-text-image",
                      [this](std::size_t) { cfg.cosine_text_image = true; },
                      "use cosine instead of raw dot products for text-image scores");
        cmd->add_flag("--f32", [this](std::size_t) { cfg.precision = Precision::F32; },
                      "run loss evaluation in 32-bit");
    }
};

SynthWorld load_world(const fs::path& world_json) {
    std::ifstream in(world_json);
    if (!in) fail("io-error", "cannot open world file: " + world_json.string());
    json j = json::parse(in, nullptr, true, true);
    return generate_world(WorldConfig::from_json(j.at("world_config")));
}

std::vector<Index> parse_ks(const std::string& spec) {
    std::vector<Index> ks;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) ks.push_back(std::stol(tok));
    }
    if (ks.empty()) fail("invalid-argument", "no K values in: " + spec);
    return ks;
}

// ---------------------------------------------------------------------------

int run_synth_gen(const WorldFlags& wf, std::uint64_t seed, const fs::path& out) {
    WorldConfig cfg = wf.cfg;
    cfg.seed = seed;
    const SynthWorld world = generate_world(cfg);

    RunManifest manifest(out, "synth-gen", cfg.to_json());
    const fs::path store_path = out / "world.store";
    const std::size_t bytes = write_store(world.store, store_path.string(), cfg.crop);
    json vocab_meta = {{"words", world.vocab.words()},
                       {"token_dim", world.vocab.token_dim()},
                       {"construction", "world"},
                       {"seed", cfg.seed}};
    const fs::path manifest_path = out / "manifest.jsonl";
    std::vector<std::string> words = world.vocab.words();
    write_manifest(world.store, manifest_path.string(), words, &vocab_meta);
    const fs::path world_path = out / "world.json";
    write_text_file(world_path, world.metadata().dump(2) + "\n");

    manifest.add(store_path);
    manifest.add(manifest_path);
    manifest.add(world_path);
    manifest.finish();
    std::printf("wrote %zu bytes: %zu images, %zu captions, vocab %lld words\n", bytes,
                world.store.images.size(), world.store.captions.size(),
                static_cast<long long>(world.vocab.size()));
    std::printf("store hash %s\n", file_hash(store_path).c_str());
    return 0;
}

int run_ingest(const fs::path& input, const fs::path& out, Index expect_d) {
    std::ifstream in(input);
    if (!in) fail("io-error", "cannot open input: " + input.string());
    StoreRecords records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, true, true);
        const std::string type = j.at("type");
        auto embedding_of = [&](const json& arr) {
            VectorXf e(static_cast<Index>(arr.size()));
            for (Index i = 0; i < e.size(); ++i)
                e(i) = arr[static_cast<std::size_t>(i)].get<float>();
            return e;
        };
        if (type == "image") {
            ImageRecord img;
            img.id = j.at("id");
            img.width = j.at("width");
            img.height = j.at("height");
            img.embedding = embedding_of(j.at("embedding"));
            for (const auto& crop : j.value("crops", json::array())) {
                const auto& b = crop.at("box");
                img.crop_candidates.emplace_back(
                    CropBox{b.at(0), b.at(1), b.at(2), b.at(3)},
                    embedding_of(crop.at("embedding")));
            }
            records.images.push_back(std::move(img));
        } else if (type == "caption") {
            CaptionRecord cap;
            cap.image_id = j.at("image_id");
            for (const auto& t : j.at("tokens")) cap.tokens.push_back(t.get<std::uint32_t>());
            cap.sentence_embedding = embedding_of(j.at("embedding"));
            records.captions.push_back(std::move(cap));
        } else {
            fail("invalid-record",
                 "line " + std::to_string(line_no) + ": unknown record type " + type);
        }
    }
    if (records.images.empty()) fail("empty-store", "input contains no image records");
    records.d = records.images.front().embedding.size();
    if (expect_d > 0 && records.d != expect_d)
        fail("dimension-mismatch", "input dimension " + std::to_string(records.d) +
                                       " does not match --d " + std::to_string(expect_d));

    RunManifest manifest(out, "ingest", json{{"input", input.string()}, {"d", records.d}});
    const fs::path store_path = out / "ingested.store";
    const std::size_t bytes = write_store(records, store_path.string());
    const fs::path manifest_path = out / "manifest.jsonl";
    write_manifest(records, manifest_path.string());
    manifest.add(store_path);
    manifest.add(manifest_path);
    manifest.finish();
    std::printf("ingested %zu images, %zu captions (d=%lld, %zu bytes)\n",
                records.images.size(), records.captions.size(),
                static_cast<long long>(records.d), bytes);
    return 0;
}

int run_build_triplets(const fs::path& store_path, const fs::path& out, Index batch_size,
                       std::uint64_t seed, const PtcConfig& ptc_cfg, long max_batches) {
    const StoreRecords store = read_store(store_path.string(), ptc_cfg.crop);
    std::unordered_map<std::string, const CaptionRecord*> caption_of;
    for (const auto& cap : store.captions) caption_of.emplace(cap.image_id, &cap);
    std::vector<BatchItem> pairs;
    for (const auto& img : store.images) {
        auto it = caption_of.find(img.id);
        if (it != caption_of.end()) pairs.push_back({&img, it->second});
    }
    if (static_cast<Index>(pairs.size()) < batch_size)
        fail("store-too-small", "store has fewer captioned images than one batch");

    Rng shuffle_rng(substream_seed(seed, "triplet-batches"));
    const auto perm = shuffle_rng.permutation(static_cast<Index>(pairs.size()));
    const long n_batches = static_cast<long>(pairs.size()) / batch_size;
    const long limit = max_batches > 0 ? std::min(max_batches, n_batches) : n_batches;

    RunManifest manifest(out, "build-triplets",
                         json{{"store", store_path.string()},
                              {"batch_size", batch_size},
                              {"seed", seed},
                              {"crop_min", ptc_cfg.crop.crop_min},
                              {"crop_max", ptc_cfg.crop.crop_max},
                              {"p_other_crop", ptc_cfg.p_other_crop},
                              {"p_other_original", ptc_cfg.p_other_original}});
    const fs::path triplet_path = out / "triplets.jsonl";
    std::ofstream tout(triplet_path, std::ios::trunc);
    if (!tout) fail("io-error", "cannot open for writing: " + triplet_path.string());

    long total = 0, kept = 0;
    long by_provenance[3] = {0, 0, 0};
    for (long b = 0; b < limit; ++b) {
        std::vector<BatchItem> batch;
        for (Index k = 0; k < batch_size; ++k)
            batch.push_back(pairs[static_cast<std::size_t>(
                perm[static_cast<std::size_t>(b * batch_size + k)])]);
        Rng batch_rng(substream_seed(seed, "ptc-step", static_cast<std::uint64_t>(b)));
        const auto triplets = construct_pseudo_triplets(batch, batch_rng, ptc_cfg);
        total += batch_size;
        kept += static_cast<long>(triplets.size());
        for (const auto& t : triplets) {
            ++by_provenance[static_cast<int>(t.provenance)];
            json line = {{"reference_id", t.reference_source_id},
                         {"provenance", to_string(t.provenance)},
                         {"caption_tokens", t.caption_tokens},
                         {"target_id", t.target_id}};
            tout << line.dump() << "\n";
        }
    }
    tout.close();
    manifest.add(triplet_path);
    manifest.finish();
    std::printf("batches %ld, candidates %ld, kept %ld (%.1f%%)\n", limit, total, kept,
                total ? 100.0 * kept / total : 0.0);
    std::printf("provenance: SELF_CROP %ld, OTHER_CROP %ld, OTHER_ORIGINAL %ld\n",
                by_provenance[0], by_provenance[1], by_provenance[2]);
    return 0;
}

int run_train(const fs::path& store_path, const fs::path& world_path, const fs::path& out,
              TrainConfig cfg, std::uint64_t seed, const fs::path& resume) {
    cfg.seed = seed;
    const SynthWorld world = load_world(world_path);
    const StoreRecords store = store_path.empty()
                                   ? world.store
                                   : read_store(store_path.string(), world.config.crop);
    if (store.d != world.config.d)
        fail("dimension-mismatch", "store dimension does not match the world configuration");

    const Index d = store.d;
    const Index hidden = cfg.hidden_dim > 0 ? cfg.hidden_dim : d;
    MappingParams params = init_mapping({d, hidden, world.vocab.token_dim()}, seed);
    OptimizerState opt;
    long start_step = 0;
    if (!resume.empty()) {
        Checkpoint ck = read_checkpoint(resume.string());
        params = std::move(ck.params);
        opt = std::move(ck.opt);
        start_step = opt.step;
    }

    RunManifest manifest(out, "train",
                         json{{"store", store_path.string()},
                              {"world", world_path.string()},
                              {"train", cfg.to_json()}});
    const auto on_checkpoint = [&](long step, const MappingParams& p,
                                   const OptimizerState& s) {
        const fs::path path = out / ("checkpoint_" + std::to_string(step) + ".ckpt");
        write_checkpoint(path.string(), p, s);
        manifest.add(path);
    };
    const TrainResult result = train(store, world.vocab, world.text_params, cfg,
                                     std::move(params), std::move(opt), start_step,
                                     cfg.checkpoint_interval > 0 ? on_checkpoint
                                                                 : CheckpointSink{});

    const fs::path ckpt_path = out / "checkpoint.ckpt";
    write_checkpoint(ckpt_path.string(), result.params, result.opt);
    const fs::path log_path = out / "train_log.jsonl";
    std::string log;
    for (const auto& line : result.log_lines) log += line + "\n";
    write_text_file(log_path, log);
    manifest.add(ckpt_path);
    manifest.add(log_path);
    manifest.finish();
    std::printf("applied %ld steps (%ld skipped), loss %.4f -> %.4f\n", result.steps_applied,
                result.steps_skipped, result.first_loss, result.last_loss);
    std::printf("checkpoint %s\n", file_hash(ckpt_path).c_str());
    return 0;
}

int run_eval(const fs::path& store_path, const fs::path& world_path,
             const fs::path& checkpoint_path, fs::path out, const std::string& task_spec,
             const std::string& ks_spec, Index max_tasks, std::uint64_t seed) {
    if (const char* env = std::getenv("DI2W_REPORT_DIR"); env && *env) out = env;
    const SynthWorld world = load_world(world_path);
    const StoreRecords store = store_path.empty()
                                   ? world.store
                                   : read_store(store_path.string(), world.config.crop);
    const Checkpoint ck = read_checkpoint(checkpoint_path.string());
    const Gallery gallery = gallery_from_store(store);
    const std::vector<Index> ks = parse_ks(ks_spec);

    std::vector<EvalTask> tasks;
    std::stringstream ss(task_spec);
    std::string kind_name;
    std::string skipped;
    while (std::getline(ss, kind_name, ',')) {
        TemplateKind kind;
        if (kind_name == "composition") kind = TemplateKind::ObjectComposition;
        else if (kind_name == "domain") kind = TemplateKind::DomainConversion;
        else if (kind_name == "sentence") kind = TemplateKind::SentenceManipulation;
        else fail("invalid-argument", "unknown task kind: " + kind_name);
        try {
            auto batch = make_eval_tasks(world, kind, max_tasks);
            tasks.insert(tasks.end(), batch.begin(), batch.end());
        } catch (const Error& e) {
            if (std::string(e.code()) != "no-tasks") throw;
            skipped += (skipped.empty() ? "" : ", ") + kind_name;
        }
    }
    if (!skipped.empty())
        std::fprintf(stderr, "warning: no instances for task kinds: %s\n", skipped.c_str());

    const json cfg_json = {{"world", world_path.string()},
                           {"checkpoint", checkpoint_path.string()},
                           {"tasks", task_spec},
                           {"ks", ks_spec},
                           {"max_tasks", max_tasks}};
    const RetrievalReport report = evaluate(ck.params, tasks, gallery, world.vocab,
                                            world.text_params, ks, seed,
                                            config_hash(cfg_json));

    RunManifest manifest(out, "eval", cfg_json);
    const fs::path txt = out / "report.txt";
    const fs::path csv = out / "report.csv";
    const fs::path js = out / "report.json";
    write_text_file(txt, report.to_text());
    write_text_file(csv, report.to_csv());
    write_text_file(js, report.to_json().dump(2) + "\n");
    manifest.add(txt);
    manifest.add(csv);
    manifest.add(js);
    manifest.finish();
    std::printf("%s", report.to_text().c_str());
    return 0;
}

int run_gradcheck(Index d, Index batch, std::uint64_t seed, double h, double tau,
                  double tolerance, Index coords, long corrupt) {
    const Vocabulary vocab = Vocabulary::build({"dog", "cat", "tree", "car"}, d, seed);
    const ToyTextParams text = make_toy_text_params(d, d, d, seed + 1);
    const MappingParams params = init_mapping({d, d, d}, seed + 2);
    Rng rng(seed + 3);
    std::vector<PseudoTriplet> triplets;
    for (Index i = 0; i < batch; ++i) {
        PseudoTriplet t;
        t.reference = rng.normal_vector(d);
        t.target = rng.normal_vector(d);
        t.caption_embedding = rng.normal_vector(d);
        const std::size_t n = 1 + rng.uniform_int(3);
        for (std::size_t k = 0; k < n; ++k)
            t.caption_tokens.push_back(static_cast<std::uint32_t>(rng.uniform_int(vocab.size())));
        triplets.push_back(std::move(t));
    }
    LossConfig cfg;
    cfg.tau = tau;
    FiniteDiffOptions opts;
    opts.h = h;
    opts.tolerance = tolerance;
    opts.max_coords = coords;
    opts.seed = seed;
    opts.corrupt_coord = corrupt;
    const auto report = finite_diff_check(params, triplets, vocab, text, cfg, opts);
    std::printf("coords=%lld h=%g tau=%g max_rel_err=%.3e tolerance=%g worst_coord=%lld %s\n",
                static_cast<long long>(report.coords_checked), h, tau, report.max_rel_err,
                tolerance, static_cast<long long>(report.worst.coord),
                report.pass ? "PASS" : "FAIL");
    return report.pass ? 0 : 1;
}

int run_crop_sweep(const WorldFlags& wf, const TrainFlags& tf, std::uint64_t seed,
                   const fs::path& out, const std::string& ranges_spec, Index max_tasks) {
    std::vector<std::pair<int, int>> ranges;
    std::stringstream ss(ranges_spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto dash = tok.find('-');
        if (dash == std::string::npos)
            fail("invalid-argument", "range must look like 32-64: " + tok);
        ranges.emplace_back(std::stoi(tok.substr(0, dash)), std::stoi(tok.substr(dash + 1)));
    }
    if (ranges.empty()) fail("invalid-argument", "no crop ranges given");

    RunManifest manifest(out, "crop-sweep",
                         json{{"ranges", ranges_spec},
                              {"seed", seed},
                              {"world", wf.cfg.to_json()},
                              {"train", tf.cfg.to_json()}});
    json rows = json::array();
    std::string best_range;
    double best_recall = -1.0;
    std::string csv = "crop_min,crop_max,recall_at_1\n";
    for (const auto& [lo, hi] : ranges) {
        WorldConfig wc = wf.cfg;
        wc.seed = seed;
        wc.crop.crop_min = lo;
        wc.crop.crop_max = hi;
        const SynthWorld world = generate_world(wc);
        TrainConfig cfg = tf.cfg;
        cfg.seed = seed;
        cfg.crop_min = lo;
        cfg.crop_max = hi;
        const TrainResult trained = train(world.store, world.vocab, world.text_params, cfg,
                                          init_mapping({wc.d, wc.d, wc.d}, seed));
        const Gallery gallery = gallery_from_store(world.store);
        const auto tasks = make_eval_tasks(world, TemplateKind::ObjectComposition, max_tasks);
        const RetrievalReport report = evaluate(trained.params, tasks, gallery, world.vocab,
                                                world.text_params, {1});
        const double recall = report.value("object_composition", 1);
        const std::string label = std::to_string(lo) + "-" + std::to_string(hi);
        std::printf("crop range %-9s recall@1 = %.4f\n", label.c_str(), recall);
        csv += std::to_string(lo) + "," + std::to_string(hi) + "," + std::to_string(recall) +
               "\n";
        rows.push_back({{"crop_min", lo}, {"crop_max", hi}, {"recall_at_1", recall}});
        if (recall > best_recall) {
            best_recall = recall;
            best_range = label;
        }
    }
    std::printf("best range on this run: %s (recall@1 %.4f)\n", best_range.c_str(),
                best_recall);
    const fs::path csv_path = out / "sweep.csv";
    const fs::path json_path = out / "sweep.json";
    write_text_file(csv_path, csv);
    write_text_file(json_path,
                    json{{"rows", rows}, {"best_range", best_range}}.dump(2) + "\n");
    manifest.add(csv_path);
    manifest.add(json_path);
    manifest.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pseudo-triplet pre-training and composed retrieval harness"};
    app.require_subcommand(1);
    std::uint64_t seed = 42;
    app.add_option("--seed", seed, "master seed; every stream derives from it")
        ->capture_default_str();

    // synth-gen
    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic world and store");
    WorldFlags synth_world_flags;
    synth_world_flags.attach(synth);
    std::string synth_out = "runs/synth";
    synth->add_option("--out", synth_out, "output directory")->capture_default_str();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "convert external embeddings to a store");
    std::string ingest_input;
    std::string ingest_out = "runs/ingest";
    Index ingest_d = 0;
    ingest->add_option("--input", ingest_input, "JSON-lines records")->required();
    ingest->add_option("--out", ingest_out, "output directory")->capture_default_str();
    ingest->add_option("--d", ingest_d, "expected embedding dimension (0 = infer)")
        ->capture_default_str();

    // build-triplets
    auto* bt = app.add_subcommand("build-triplets", "construct pseudo triplets from a store");
    std::string bt_store;
    std::string bt_out = "runs/triplets";
    Index bt_batch = 64;
    long bt_max_batches = 0;
    PtcConfig bt_cfg;
    bt->add_option("--store", bt_store, "store file")->required();
    bt->add_option("--out", bt_out, "output directory")->capture_default_str();
    bt->add_option("--batch-size", bt_batch, "batch size")->capture_default_str();
    bt->add_option("--max-batches", bt_max_batches, "limit batches (0 = one epoch)")
        ->capture_default_str();
    bt->add_option("--crop-min", bt_cfg.crop.crop_min, "min eligible crop side")
        ->capture_default_str();
    bt->add_option("--crop-max", bt_cfg.crop.crop_max, "max eligible crop side")
        ->capture_default_str();
    bt->add_option("--p-other-crop", bt_cfg.p_other_crop, "other-crop probability")
        ->capture_default_str();
    bt->add_option("--p-other-original", bt_cfg.p_other_original, "other-original probability")
        ->capture_default_str();
    bt->add_flag("--cosine-text-image",
                 [&bt_cfg](std::size_t) { bt_cfg.cosine_text_image = true; },
                 "use cosine for text-image scores");

    // train
    auto* tr = app.add_subcommand("train", "train the image-to-word mapper");
    std::string tr_store, tr_world, tr_resume;
    std::string tr_out = "runs/train";
    TrainFlags tr_flags;
    tr_flags.attach(tr);
    tr->add_option("--store", tr_store, "store file (defaults to the world's own store)");
    tr->add_option("--world", tr_world, "world.json with the frozen encoder setup")->required();
    tr->add_option("--out", tr_out, "output directory")->capture_default_str();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate retrieval with a trained checkpoint");
    std::string ev_store, ev_world, ev_ckpt;
    std::string ev_out = "runs/eval";
    std::string ev_tasks = "composition,domain,sentence";
    std::string ev_ks = "1,5,10";
    Index ev_max_tasks = 400;
    ev->add_option("--store", ev_store, "store file (defaults to the world's own store)");
    ev->add_option("--world", ev_world, "world.json with the frozen encoder setup")->required();
    ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
    ev->add_option("--out", ev_out, "report directory (or $DI2W_REPORT_DIR)")
        ->capture_default_str();
    ev->add_option("--tasks", ev_tasks, "comma list: composition,domain,sentence")
        ->capture_default_str();
    ev->add_option("--ks", ev_ks, "comma list of K values")->capture_default_str();
    ev->add_option("--max-tasks", ev_max_tasks, "cap per task kind (0 = all)")
        ->capture_default_str();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    Index gc_d = 16, gc_batch = 8, gc_coords = 0;
    double gc_h = 1e-5, gc_tau = 100.0, gc_tol = 1e-5;
    long gc_corrupt = -1;
    gc->add_option("--d", gc_d, "embedding dimension")->capture_default_str();
    gc->add_option("--batch", gc_batch, "triplet batch size")->capture_default_str();
    gc->add_option("--h", gc_h, "central-difference step")->capture_default_str();
    gc->add_option("--tau", gc_tau, "contrastive temperature")->capture_default_str();
    gc->add_option("--tolerance", gc_tol, "max relative error accepted")->capture_default_str();
    gc->add_option("--coords", gc_coords, "random coordinate subset (0 = all)")
        ->capture_default_str();
    gc->add_option("--corrupt-coord", gc_corrupt,
                   "fault injection: double this gradient coordinate");

    // crop-sweep
    auto* cs = app.add_subcommand("crop-sweep",
                                  "train and evaluate across crop size ranges");
    WorldFlags cs_world_flags;
    cs_world_flags.cfg.image_size = 512;  // leaves room for the largest default range
    cs_world_flags.cfg.image_count = 1000;
    TrainFlags cs_train_flags;
    cs_train_flags.cfg.learning_rate = 1e-2;
    cs_train_flags.cfg.tau = 10.0;
    cs_train_flags.cfg.warmup_steps = 20;
    cs_world_flags.attach(cs);
    cs_train_flags.attach(cs);
    std::string cs_out = "runs/crop_sweep";
    std::string cs_ranges = "16-32,32-64,64-128,128-256";
    Index cs_max_tasks = 300;
    cs->add_option("--out", cs_out, "output directory")->capture_default_str();
    cs->add_option("--ranges", cs_ranges, "comma list of lo-hi crop ranges")
        ->capture_default_str();
    cs->add_option("--max-tasks", cs_max_tasks, "evaluation tasks per range")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "di2w: usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth_gen(synth_world_flags, seed, synth_out);
        if (ingest->parsed()) return run_ingest(ingest_input, ingest_out, ingest_d);
        if (bt->parsed())
            return run_build_triplets(bt_store, bt_out, bt_batch, seed, bt_cfg, bt_max_batches);
        if (tr->parsed()) return run_train(tr_store, tr_world, tr_out, tr_flags.cfg, seed,
                                           tr_resume);
        if (ev->parsed())
            return run_eval(ev_store, ev_world, ev_ckpt, ev_out, ev_tasks, ev_ks, ev_max_tasks,
                            seed);
        if (gc->parsed())
            return run_gradcheck(gc_d, gc_batch, seed, gc_h, gc_tau, gc_tol, gc_coords,
                                 gc_corrupt);
        if (cs->parsed())
            return run_crop_sweep(cs_world_flags, cs_train_flags, seed, cs_out, cs_ranges,
                                  cs_max_tasks);
    } catch (const Error& e) {
        std::cerr << "di2w: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "di2w: error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
