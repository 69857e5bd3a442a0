#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "di2w/embedding_store.hpp"

#include <cstdio>
#include <filesystem>

using namespace di2w;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

VectorXf vecf(std::initializer_list<float> vals) {
    VectorXf v(static_cast<Index>(vals.size()));
    Index i = 0;
    for (float x : vals) v(i++) = x;
    return v;
}

StoreRecords sample_records() {
    StoreRecords r;
    r.d = 4;
    ImageRecord a{"img_a", 224, 224, vecf({1.f, 2.f, 3.f, 4.f}), {}};
    a.crop_candidates.emplace_back(CropBox{10, 10, 40, 40}, vecf({0.5f, -0.25f, 0.125f, 2.f}));
    ImageRecord b{"img_b", 128, 96, vecf({-1.f, 0.5f, 0.f, 8.f}), {}};
    r.images = {a, b};
    r.captions.push_back({"img_a", {7, 8, 9}, vecf({0.1f, 0.2f, 0.3f, 0.4f})});
    r.captions.push_back({"img_b", {4}, vecf({1.f, 1.f, 1.f, 1.f})});
    return r;
}

StoreRecords random_records(Rng& rng, Index d) {
    StoreRecords r;
    r.d = d;
    const int n = 1 + static_cast<int>(rng.uniform_int(5));
    for (int i = 0; i < n; ++i) {
        ImageRecord img;
        img.id = "img_" + std::to_string(i);
        img.width = 224;
        img.height = 224;
        img.embedding = rng.normal_vector(d).cast<float>();
        const int ncand = static_cast<int>(rng.uniform_int(3));
        for (int c = 0; c < ncand; ++c) {
            CropBox box{static_cast<int>(rng.uniform_int(100)),
                        static_cast<int>(rng.uniform_int(100)),
                        32 + static_cast<int>(rng.uniform_int(33)),
                        32 + static_cast<int>(rng.uniform_int(33))};
            img.crop_candidates.emplace_back(box, rng.normal_vector(d).cast<float>());
        }
        r.images.push_back(std::move(img));
        if (rng.uniform() < 0.8) {
            CaptionRecord cap;
            cap.image_id = "img_" + std::to_string(i);
            const int ntok = 1 + static_cast<int>(rng.uniform_int(6));
            for (int t = 0; t < ntok; ++t)
                cap.tokens.push_back(static_cast<std::uint32_t>(rng.uniform_int(100)));
            cap.sentence_embedding = rng.normal_vector(d).cast<float>();
            r.captions.push_back(std::move(cap));
        }
    }
    return r;
}

bool records_equal(const StoreRecords& a, const StoreRecords& b) {
    if (a.d != b.d || a.images.size() != b.images.size() || a.captions.size() != b.captions.size())
        return false;
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        const auto& x = a.images[i];
        const auto& y = b.images[i];
        if (x.id != y.id || x.width != y.width || x.height != y.height) return false;
        if (x.embedding != y.embedding) return false;
        if (x.crop_candidates.size() != y.crop_candidates.size()) return false;
        for (std::size_t c = 0; c < x.crop_candidates.size(); ++c) {
            if (!(x.crop_candidates[c].first == y.crop_candidates[c].first)) return false;
            if (x.crop_candidates[c].second != y.crop_candidates[c].second) return false;
        }
    }
    for (std::size_t i = 0; i < a.captions.size(); ++i) {
        const auto& x = a.captions[i];
        const auto& y = b.captions[i];
        if (x.image_id != y.image_id || x.tokens != y.tokens) return false;
        if (x.sentence_embedding != y.sentence_embedding) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("l2_normalize basic cases") {
    VectorXd v(2);
    v << 3.0, 4.0;
    const VectorXd n = l2_normalize(v);
    CHECK(n(0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n(1) == doctest::Approx(0.8).epsilon(1e-12));

    VectorXd e1 = VectorXd::Zero(5);
    e1(0) = 1.0;
    CHECK((l2_normalize(e1) - e1).norm() == 0.0);

    VectorXd zero = VectorXd::Zero(3);
    CHECK_THROWS_AS(l2_normalize(zero), Error);
}

TEST_CASE("l2_normalize is idempotent and unit-norm on random vectors") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const VectorXd v = rng.normal_vector(1 + static_cast<Index>(rng.uniform_int(16)));
        if (v.norm() == 0.0) continue;
        const VectorXd n = l2_normalize(v);
        CHECK(std::abs(n.norm() - 1.0) <= 1e-12);
        CHECK((l2_normalize(n) - n).norm() <= 1e-12);
    }
}

TEST_CASE("empty record list round-trips as a header-only file") {
    StoreRecords empty;
    empty.d = 4;
    const auto path = temp_path("di2w_empty.store");
    const std::size_t bytes = write_store(empty, path);
    CHECK(bytes == 4 + 2 + 4 + 4);  // magic + version + d + count
    const StoreRecords back = read_store(path);
    CHECK(back.d == 4);
    CHECK(back.record_count() == 0);
}

TEST_CASE("write then read is bit-identical") {
    const StoreRecords records = sample_records();
    const auto path = temp_path("di2w_roundtrip.store");
    write_store(records, path);
    const StoreRecords back = read_store(path);
    CHECK(records_equal(records, back));
    // Byte-level: re-serializing what we read gives the same buffer.
    CHECK(serialize_store(records) == serialize_store(back));
}

TEST_CASE("mixed dimensions are rejected") {
    StoreRecords r;
    r.d = 4;
    r.images.push_back({"a", 224, 224, vecf({1, 2, 3, 4}), {}});
    r.images.push_back({"b", 224, 224, VectorXf::Ones(8), {}});
    CHECK_THROWS_WITH_AS(write_store(r, temp_path("di2w_mixed.store")),
                         doctest::Contains("dimension-mismatch"), Error);
}

TEST_CASE("duplicate ids are rejected") {
    StoreRecords r;
    r.d = 2;
    r.images.push_back({"same", 64, 64, vecf({1, 2}), {}});
    r.images.push_back({"same", 64, 64, vecf({3, 4}), {}});
    CHECK_THROWS_WITH_AS(write_store(r, temp_path("di2w_dup.store")),
                         doctest::Contains("duplicate-id"), Error);
}

TEST_CASE("corrupted files are rejected with the designated error") {
    const StoreRecords records = sample_records();
    auto bytes = serialize_store(records);

    SUBCASE("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        bad[1] = 'X';
        CHECK_THROWS_WITH_AS(parse_store(bad), doctest::Contains("bad-magic"), Error);
    }
    SUBCASE("unsupported version") {
        auto bad = bytes;
        bad[4] = 99;
        CHECK_THROWS_WITH_AS(parse_store(bad), doctest::Contains("unsupported-version"), Error);
    }
    SUBCASE("payload truncated by one byte") {
        auto bad = bytes;
        bad.pop_back();
        CHECK_THROWS_WITH_AS(parse_store(bad), doctest::Contains("truncated"), Error);
    }
    SUBCASE("trailing bytes") {
        auto bad = bytes;
        bad.push_back(0);
        CHECK_THROWS_WITH_AS(parse_store(bad), doctest::Contains("truncated"), Error);
    }
    SUBCASE("NaN payload") {
        // First image embedding float starts after magic, version, d, count,
        // kind byte, id string (4 + len).
        const std::size_t off = 4 + 2 + 4 + 4 + 1 + 4 + records.images[0].id.size() + 4 + 4;
        const std::uint32_t nan_bits = 0x7fc00000u;
        auto bad = bytes;
        for (int i = 0; i < 4; ++i)
            bad[off + i] = static_cast<std::uint8_t>(nan_bits >> (8 * i));
        CHECK_THROWS_WITH_AS(parse_store(bad), doctest::Contains("non-finite"), Error);
    }
}

TEST_CASE("non-finite embeddings are rejected at write time") {
    StoreRecords r;
    r.d = 2;
    r.images.push_back({"a", 64, 64, vecf({1.f, std::numeric_limits<float>::infinity()}), {}});
    CHECK_THROWS_WITH_AS(serialize_store(r), doctest::Contains("non-finite"), Error);
}

TEST_CASE("captions must reference stored images and carry tokens") {
    StoreRecords r;
    r.d = 2;
    r.images.push_back({"a", 64, 64, vecf({1, 2}), {}});
    r.captions.push_back({"missing", {1}, vecf({1, 2})});
    CHECK_THROWS_WITH_AS(serialize_store(r), doctest::Contains("invalid-record"), Error);

    r.captions[0] = {"a", {}, vecf({1, 2})};
    CHECK_THROWS_WITH_AS(serialize_store(r), doctest::Contains("invalid-record"), Error);
}

TEST_CASE("images carrying crop candidates must leave room to crop") {
    StoreRecords r;
    r.d = 2;
    ImageRecord img{"a", 40, 40, vecf({1, 2}), {}};
    img.crop_candidates.emplace_back(CropBox{0, 0, 32, 32}, vecf({1, 2}));
    r.images.push_back(img);
    CHECK_THROWS_WITH_AS(serialize_store(r), doctest::Contains("invalid-record"), Error);
}

TEST_CASE("randomized round-trips are exact") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const Index d = 1 + static_cast<Index>(rng.uniform_int(16));
        const StoreRecords records = random_records(rng, d);
        const auto bytes = serialize_store(records);
        const StoreRecords back = parse_store(bytes);
        CHECK(records_equal(records, back));
        CHECK(serialize_store(back) == bytes);
    }
}

TEST_CASE("manifest lines carry id, caption text and tokens") {
    const StoreRecords records = sample_records();
    const auto path = temp_path("di2w_manifest.jsonl");
    std::vector<std::string> words;
    for (int i = 0; i < 12; ++i) words.push_back("w" + std::to_string(i));
    nlohmann::json vocab_meta = {{"words", words}, {"token_dim", 4}, {"seed", 1}};
    write_manifest(records, path, words, &vocab_meta);

    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    auto vocab_line = nlohmann::json::parse(line);
    CHECK(vocab_line.contains("vocab"));
    REQUIRE(std::getline(in, line));
    auto cap = nlohmann::json::parse(line);
    CHECK(cap["id"] == "img_a");
    CHECK(cap["caption"] == "w7 w8 w9");
    CHECK(cap["tokens"] == nlohmann::json({7, 8, 9}));
}
