#pragma once

#include "di2w/common.hpp"
#include "di2w/encoders.hpp"
#include "di2w/pcm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>
#include <unordered_map>

// Inference-side query composition, cosine ranking and Recall@K reporting.

namespace di2w {

struct QueryTemplate {
    TemplateKind kind = TemplateKind::ObjectComposition;
    std::vector<std::uint32_t> extra_tokens;
};

inline void validate_query_template(const QueryTemplate& t) {
    switch (t.kind) {
        case TemplateKind::DomainConversion:
            if (t.extra_tokens.size() != 1)
                fail("invalid-template", "domain conversion takes exactly one tag");
            return;
        case TemplateKind::ObjectComposition:
        case TemplateKind::SentenceManipulation:
            if (t.extra_tokens.empty())
                fail("invalid-template", "template needs at least one token");
            return;
        default:
            fail("invalid-template", "not an inference template kind");
    }
}

/// Maps the reference embedding to its pseudo token, renders the template
/// around it, encodes, and returns the normalized query embedding.
inline VectorXd compose_query(const MappingParams& params, const VectorXd& reference,
                              const QueryTemplate& tmpl, const Vocabulary& vocab,
                              const ToyTextParams& text) {
    validate_query_template(tmpl);
    auto [pseudo, cache] = map_forward(params, reference);
    const PromptSequence seq =
        build_prompt(tmpl.kind, pseudo, tmpl.extra_tokens, vocab, Connective::Comma);
    return l2_normalize(text_forward(seq, text));
}

/// Candidate indices sorted by descending cosine similarity to the query;
/// ties broken by the lower index.
inline std::vector<Index> rank_candidates(const VectorXd& query, const MatrixXd& gallery) {
    if (gallery.rows() == 0) fail("empty-gallery", "gallery must be non-empty");
    if (gallery.cols() != query.size())
        fail("dimension-mismatch", "gallery dimension does not match query");
    const VectorXd q = l2_normalize(query);
    VectorXd scores(gallery.rows());
    for (Index i = 0; i < gallery.rows(); ++i) {
        const double n = gallery.row(i).norm();
        if (!(n > 0)) fail("zero-vector", "gallery entry " + std::to_string(i) + " has zero norm");
        scores(i) = gallery.row(i).dot(q) / n;
    }
    std::vector<Index> order(static_cast<std::size_t>(gallery.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return scores(a) > scores(b); });
    return order;
}

/// Fraction of queries whose top-K ranked candidates contain at least one
/// ground-truth index. K larger than the gallery is clamped with a warning.
inline double recall_at_k(const std::vector<std::vector<Index>>& rankings,
                          const std::vector<std::vector<Index>>& truths, Index k) {
    if (k < 1) fail("invalid-argument", "K must be at least 1");
    if (rankings.size() != truths.size())
        fail("invalid-argument", "rankings and truth sets disagree in count");
    if (rankings.empty()) fail("invalid-argument", "no queries given");
    Index hits = 0;
    bool warned = false;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& ranked = rankings[q];
        if (truths[q].empty()) fail("invalid-argument", "empty truth set for a query");
        Index kq = k;
        if (kq > static_cast<Index>(ranked.size())) {
            if (!warned) {
                std::fprintf(stderr, "warning: K=%lld exceeds gallery size %zu, clamping\n",
                             static_cast<long long>(kq), ranked.size());
                warned = true;
            }
            kq = static_cast<Index>(ranked.size());
        }
        const std::set<Index> truth(truths[q].begin(), truths[q].end());
        for (Index r = 0; r < kq; ++r) {
            if (truth.count(ranked[static_cast<std::size_t>(r)])) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

// ---------------------------------------------------------------------------
// Task evaluation

struct EvalTask {
    std::string group;  // report row label, e.g. "object_composition"
    QueryTemplate tmpl;
    VectorXd reference;
    std::vector<std::string> truth_ids;
};

struct Gallery {
    std::vector<std::string> ids;
    MatrixXd embeddings;  // one row per candidate

    Index index_of(const std::string& id) const {
        for (Index i = 0; i < static_cast<Index>(ids.size()); ++i)
            if (ids[static_cast<std::size_t>(i)] == id) return i;
        fail("unknown-id", "id not in gallery: " + id);
    }
};

inline Gallery gallery_from_store(const StoreRecords& store) {
    Gallery g;
    g.embeddings.resize(static_cast<Index>(store.images.size()), store.d);
    for (Index i = 0; i < static_cast<Index>(store.images.size()); ++i) {
        const auto& img = store.images[static_cast<std::size_t>(i)];
        g.ids.push_back(img.id);
        g.embeddings.row(i) = img.embedding.cast<double>().transpose();
    }
    return g;
}

struct ReportRow {
    std::string task;
    Index k = 0;
    double recall = 0;
};

struct RetrievalReport {
    std::vector<ReportRow> rows;
    std::uint64_t seed = 0;
    std::string config_hash;

    std::string to_text() const {
        std::string out = "task                        K     recall\n";
        char buf[96];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%-26s %4lld   %8.4f\n", r.task.c_str(),
                          static_cast<long long>(r.k), r.recall);
            out += buf;
        }
        return out;
    }

    std::string to_csv() const {
        std::string out = "task,K,recall\n";
        for (const auto& r : rows)
            out += r.task + "," + std::to_string(r.k) + "," + std::to_string(r.recall) + "\n";
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows_json = nlohmann::json::array();
        for (const auto& r : rows)
            rows_json.push_back({{"task", r.task}, {"k", r.k}, {"recall", r.recall}});
        return {{"seed", seed}, {"config_hash", config_hash}, {"rows", rows_json}};
    }

    double value(const std::string& task, Index k) const {
        for (const auto& r : rows)
            if (r.task == task && r.k == k) return r.recall;
        fail("unknown-id", "no report row for " + task + "@" + std::to_string(k));
    }
};

/// Composes and ranks every task query, then reports Recall@K per task group
/// plus the arithmetic mean across groups.
inline RetrievalReport evaluate(const MappingParams& params, const std::vector<EvalTask>& tasks,
                                const Gallery& gallery, const Vocabulary& vocab,
                                const ToyTextParams& text, const std::vector<Index>& ks,
                                std::uint64_t seed = 0, std::string config_hash = {}) {
    if (tasks.empty()) fail("empty-task-set", "no evaluation tasks given");
    if (ks.empty()) fail("invalid-argument", "no K values given");

    std::unordered_map<std::string, Index> id_to_index;
    for (Index i = 0; i < static_cast<Index>(gallery.ids.size()); ++i)
        id_to_index.emplace(gallery.ids[static_cast<std::size_t>(i)], i);

    std::vector<std::string> group_order;
    std::unordered_map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (!groups.count(tasks[t].group)) group_order.push_back(tasks[t].group);
        groups[tasks[t].group].push_back(t);
    }

    std::vector<std::vector<Index>> rankings(tasks.size());
    std::vector<std::vector<Index>> truths(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const VectorXd query =
            compose_query(params, tasks[t].reference, tasks[t].tmpl, vocab, text);
        rankings[t] = rank_candidates(query, gallery.embeddings);
        for (const auto& id : tasks[t].truth_ids) {
            auto it = id_to_index.find(id);
            if (it == id_to_index.end()) fail("unknown-id", "truth id not in gallery: " + id);
            truths[t].push_back(it->second);
        }
    }

    RetrievalReport report;
    report.seed = seed;
    report.config_hash = std::move(config_hash);
    for (Index k : ks) {
        for (const auto& g : group_order) {
            std::vector<std::vector<Index>> gr, gt;
            for (auto t : groups[g]) {
                gr.push_back(rankings[t]);
                gt.push_back(truths[t]);
            }
            report.rows.push_back({g, k, recall_at_k(gr, gt, k)});
        }
        if (group_order.size() > 1) {
            double sum = 0;
            for (const auto& g : group_order) sum += report.value(g, k);
            report.rows.push_back({"average", k, sum / static_cast<double>(group_order.size())});
        }
    }
    return report;
}

}  // namespace di2w
