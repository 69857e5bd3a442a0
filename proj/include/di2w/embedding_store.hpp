#pragma once

#include "di2w/binio.hpp"
#include "di2w/common.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <optional>
#include <unordered_map>
#include <unordered_set>

// Embedding corpus persistence.
//
// Binary layout (all integers little-endian, embeddings as f32):
//   magic   4 bytes "DI2W"
//   version u16 (currently 1)
//   d       u32 embedding dimension
//   count   u32 number of records
//   records, each tagged with a u8 kind:
//     kind 0 image:   id str, width u32, height u32, embedding d*f32,
//                     ncand u32, ncand * (x,y,w,h u32 + embedding d*f32)
//     kind 1 caption: image_id str, ntok u32, ntok*u32, embedding d*f32
//   str = u32 length + raw bytes
//
// A JSON-lines manifest sidecar mirrors the captions as
// {"id": ..., "caption": ..., "tokens": [...]} plus one optional
// {"vocab": {...}} line describing the token table.

namespace di2w {

struct CropBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    double cx() const { return x + w / 2.0; }
    double cy() const { return y + h / 2.0; }

    bool within(int width, int height) const {
        return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height;
    }

    /// Positive-area overlap with another box.
    bool intersects(const CropBox& o) const {
        return std::max(x, o.x) < std::min(x + w, o.x + o.w) &&
               std::max(y, o.y) < std::min(y + h, o.y + o.h);
    }

    bool operator==(const CropBox&) const = default;
};

struct CropConfig {
    int crop_min = 32;
    int crop_max = 64;
    bool center_exclusion = true;
};

struct ImageRecord {
    std::string id;
    int width = 0;
    int height = 0;
    VectorXf embedding;
    std::vector<std::pair<CropBox, VectorXf>> crop_candidates;
};

struct CaptionRecord {
    std::string image_id;
    std::vector<std::uint32_t> tokens;
    VectorXf sentence_embedding;
};

struct StoreRecords {
    Index d = 0;
    std::vector<ImageRecord> images;
    std::vector<CaptionRecord> captions;

    Index record_count() const {
        return static_cast<Index>(images.size() + captions.size());
    }
};

inline constexpr char kStoreMagic[4] = {'D', 'I', '2', 'W'};
inline constexpr std::uint16_t kStoreVersion = 1;

/// Returns v / ||v||. The zero vector is rejected rather than producing NaNs.
template <typename Derived>
VectorX<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
    using Scalar = typename Derived::Scalar;
    const Scalar n = v.norm();
    if (!(n > Scalar(0)))
        fail("zero-vector", "cannot normalize a vector with zero (or non-finite) norm");
    return v / n;
}

/// Row-wise normalization; every row must have positive norm.
template <typename Scalar>
MatrixX<Scalar> l2_normalize_rows(const MatrixX<Scalar>& m) {
    MatrixX<Scalar> out(m.rows(), m.cols());
    for (Index r = 0; r < m.rows(); ++r)
        out.row(r) = l2_normalize(m.row(r).transpose()).transpose();
    return out;
}

namespace detail {

template <typename Vec>
bool all_finite(const Vec& v) {
    return v.allFinite();
}

inline void check_embedding(const VectorXf& e, Index d, const std::string& where) {
    if (e.size() != d)
        fail("dimension-mismatch", where + ": embedding has dimension " +
                                       std::to_string(e.size()) + ", store declares " +
                                       std::to_string(d));
    if (!all_finite(e)) fail("non-finite", where + ": embedding contains a non-finite value");
}

}  // namespace detail

/// Structural validation shared by the write and read paths.
inline void validate_records(const StoreRecords& records, const CropConfig& crop = {}) {
    if (records.d <= 0) fail("dimension-mismatch", "store dimension must be positive");
    std::unordered_set<std::string> ids;
    for (const auto& img : records.images) {
        if (!ids.insert(img.id).second) fail("duplicate-id", "duplicate image id: " + img.id);
        detail::check_embedding(img.embedding, records.d, "image " + img.id);
        if (!img.crop_candidates.empty()) {
            if (img.width < 2 * crop.crop_min || img.height < 2 * crop.crop_min)
                fail("invalid-record", "image " + img.id +
                                           " is too small to carry crop candidates (needs >= " +
                                           std::to_string(2 * crop.crop_min) + " px per side)");
        }
        for (const auto& [box, emb] : img.crop_candidates) {
            if (!box.within(img.width, img.height))
                fail("invalid-record", "crop candidate outside image bounds on " + img.id);
            detail::check_embedding(emb, records.d, "crop of " + img.id);
        }
    }
    for (const auto& cap : records.captions) {
        if (cap.tokens.empty())
            fail("invalid-record", "caption for " + cap.image_id + " has no tokens");
        if (!ids.count(cap.image_id))
            fail("invalid-record", "caption references unknown image id: " + cap.image_id);
        detail::check_embedding(cap.sentence_embedding, records.d, "caption of " + cap.image_id);
    }
}

inline std::vector<std::uint8_t> serialize_store(const StoreRecords& records,
                                                 const CropConfig& crop = {}) {
    validate_records(records, crop);
    ByteWriter w;
    w.bytes(kStoreMagic, 4);
    w.u16(kStoreVersion);
    w.u32(static_cast<std::uint32_t>(records.d));
    w.u32(static_cast<std::uint32_t>(records.record_count()));
    auto put_embedding = [&](const VectorXf& e) {
        for (Index i = 0; i < e.size(); ++i) w.f32(e(i));
    };
    for (const auto& img : records.images) {
        w.u8(0);
        w.str(img.id);
        w.u32(static_cast<std::uint32_t>(img.width));
        w.u32(static_cast<std::uint32_t>(img.height));
        put_embedding(img.embedding);
        w.u32(static_cast<std::uint32_t>(img.crop_candidates.size()));
        for (const auto& [box, emb] : img.crop_candidates) {
            w.u32(static_cast<std::uint32_t>(box.x));
            w.u32(static_cast<std::uint32_t>(box.y));
            w.u32(static_cast<std::uint32_t>(box.w));
            w.u32(static_cast<std::uint32_t>(box.h));
            put_embedding(emb);
        }
    }
    for (const auto& cap : records.captions) {
        w.u8(1);
        w.str(cap.image_id);
        w.u32(static_cast<std::uint32_t>(cap.tokens.size()));
        for (auto t : cap.tokens) w.u32(t);
        put_embedding(cap.sentence_embedding);
    }
    return w.buffer();
}

/// Writes the binary store; returns the number of bytes written.
inline std::size_t write_store(const StoreRecords& records, const std::string& path,
                               const CropConfig& crop = {}) {
    ByteWriter w;
    auto bytes = serialize_store(records, crop);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("io-error", "cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("io-error", "write failed: " + path);
    return bytes.size();
}

inline StoreRecords parse_store(std::vector<std::uint8_t> bytes, const CropConfig& crop = {}) {
    ByteReader r(std::move(bytes));
    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.u8());
    if (std::memcmp(magic, kStoreMagic, 4) != 0)
        fail("bad-magic", "not a store file (magic mismatch)");
    const std::uint16_t version = r.u16();
    if (version != kStoreVersion)
        fail("unsupported-version", "store version " + std::to_string(version));
    StoreRecords records;
    records.d = static_cast<Index>(r.u32());
    const std::uint32_t count = r.u32();
    auto get_embedding = [&]() {
        VectorXf e(records.d);
        for (Index i = 0; i < records.d; ++i) e(i) = r.f32();
        return e;
    };
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint8_t kind = r.u8();
        if (kind == 0) {
            ImageRecord img;
            img.id = r.str();
            img.width = static_cast<int>(r.u32());
            img.height = static_cast<int>(r.u32());
            img.embedding = get_embedding();
            const std::uint32_t ncand = r.u32();
            img.crop_candidates.reserve(ncand);
            for (std::uint32_t c = 0; c < ncand; ++c) {
                CropBox box;
                box.x = static_cast<int>(r.u32());
                box.y = static_cast<int>(r.u32());
                box.w = static_cast<int>(r.u32());
                box.h = static_cast<int>(r.u32());
                img.crop_candidates.emplace_back(box, get_embedding());
            }
            records.images.push_back(std::move(img));
        } else if (kind == 1) {
            CaptionRecord cap;
            cap.image_id = r.str();
            const std::uint32_t ntok = r.u32();
            cap.tokens.reserve(ntok);
            for (std::uint32_t t = 0; t < ntok; ++t) cap.tokens.push_back(r.u32());
            cap.sentence_embedding = get_embedding();
            records.captions.push_back(std::move(cap));
        } else {
            fail("invalid-record", "unknown record kind " + std::to_string(kind));
        }
    }
    if (!r.exhausted())
        fail("truncated", "store has " + std::to_string(r.remaining()) +
                              " trailing bytes after declared records");
    validate_records(records, crop);
    return records;
}

inline StoreRecords read_store(const std::string& path, const CropConfig& crop = {}) {
    auto reader = ByteReader::from_file(path);
    std::vector<std::uint8_t> bytes;
    bytes.reserve(reader.remaining());
    while (!reader.exhausted()) bytes.push_back(reader.u8());
    return parse_store(std::move(bytes), crop);
}

/// JSON-lines manifest. `vocab_words` maps token ids to words for the caption
/// text field; when `vocab_meta` is non-null it is emitted as a {"vocab": ...}
/// line so the token table can be rebuilt.
inline void write_manifest(const StoreRecords& records, const std::string& path,
                           const std::vector<std::string>& vocab_words = {},
                           const nlohmann::json* vocab_meta = nullptr) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("io-error", "cannot open for writing: " + path);
    if (vocab_meta) {
        nlohmann::json line;
        line["vocab"] = *vocab_meta;
        out << line.dump() << "\n";
    }
    for (const auto& cap : records.captions) {
        nlohmann::json line;
        line["id"] = cap.image_id;
        std::string text;
        for (std::size_t i = 0; i < cap.tokens.size(); ++i) {
            const auto t = cap.tokens[i];
            if (i) text += ' ';
            if (t < vocab_words.size())
                text += vocab_words[t];
            else
                text += "<" + std::to_string(t) + ">";
        }
        line["caption"] = text;
        line["tokens"] = cap.tokens;
        out << line.dump() << "\n";
    }
    if (!out) fail("io-error", "write failed: " + path);
}

}  // namespace di2w
