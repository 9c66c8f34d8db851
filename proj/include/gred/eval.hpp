// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gred/common.hpp"
#include "gred/tensor.hpp"

namespace gred::eval {

enum class CorpusSide { initial, fresh };

inline std::string side_name(CorpusSide s) { return s == CorpusSide::initial ? "initial" : "new"; }

struct QueryResult {
    long gold_doc_key = -1;
    std::vector<std::pair<long, double>> ranked; // (doc_key, score), descending
};

struct RetrievalRun {
    CorpusSide side = CorpusSide::initial;
    std::string method;
    std::vector<QueryResult> results;

    void validate() const {
        for (const QueryResult& r : results) {
            std::vector<long> keys;
            for (size_t i = 0; i < r.ranked.size(); ++i) {
                if (i > 0 && r.ranked[i].second > r.ranked[i - 1].second) {
                    fail(ErrorKind::numeric, "retrieval run: ranked list not sorted by score");
                }
                keys.push_back(r.ranked[i].first);
            }
            std::sort(keys.begin(), keys.end());
            if (std::adjacent_find(keys.begin(), keys.end()) != keys.end()) {
                fail(ErrorKind::numeric, "retrieval run: duplicate doc_key in ranked list");
            }
        }
    }
};

// 1-based rank of the gold document, or 0 when absent
inline int gold_rank(const QueryResult& r) {
    for (size_t i = 0; i < r.ranked.size(); ++i) {
        if (r.ranked[i].first == r.gold_doc_key) { return static_cast<int>(i) + 1; }
    }
    return 0;
}

inline double recall_at_k(const RetrievalRun& run, int k) {
    if (k < 1) { fail(ErrorKind::config, "recall_at_k: K must be >= 1"); }
    if (run.results.empty()) { return 0.0; }
    long hits = 0;
    for (const QueryResult& r : run.results) {
        const int rank = gold_rank(r);
        if (rank >= 1 && rank <= k) { ++hits; }
    }
    return static_cast<double>(hits) / static_cast<double>(run.results.size());
}

inline double mrr_at_k(const RetrievalRun& run, int k) {
    if (k < 1) { fail(ErrorKind::config, "mrr_at_k: K must be >= 1"); }
    if (run.results.empty()) { return 0.0; }
    double total = 0.0;
    for (const QueryResult& r : run.results) {
        const int rank = gold_rank(r);
        if (rank >= 1 && rank <= k) { total += 1.0 / rank; }
    }
    return total / static_cast<double>(run.results.size());
}

// R@10 drop on the initial corpus after adaptation
inline double forgetting_score(double base_r10, double after_r10) { return base_r10 - after_r10; }

inline double tpd(double adaptation_seconds, long n_new_docs) {
    if (n_new_docs < 1) { fail(ErrorKind::config, "tpd: need at least one new document"); }
    return adaptation_seconds / static_cast<double>(n_new_docs);
}

// ---------------------------------------------------------------------------
// edit-vector similarity diagnostic
// ---------------------------------------------------------------------------

struct SimilarityReport {
    std::vector<double> bucket_edges; // ascending, length B+1
    std::vector<double> same_target_fractions;
    std::vector<double> diff_target_fractions;
    double same_target_mean = 0.0;
    double diff_target_mean = 0.0;
    long same_pairs = 0;
    long diff_pairs = 0;
    long skipped_zero_norm = 0;
};

// Pairwise cosine over δ columns, grouped by same/different target token.
// deltas: [d, u] with one column per edit request.
inline SimilarityReport cosine_similarity_stats(const numerics::Tensor& deltas,
                                                const std::vector<int>& target_labels,
                                                const std::vector<double>& bucket_edges) {
    const int d = deltas.rows();
    const int u = deltas.cols();
    if (u != static_cast<int>(target_labels.size())) {
        fail(ErrorKind::config, "cosine_similarity_stats: label count != column count");
    }
    if (u < 2) { fail(ErrorKind::config, "cosine_similarity_stats: need >= 2 columns"); }
    SimilarityReport rep;
    rep.bucket_edges = bucket_edges;
    const int B = static_cast<int>(bucket_edges.size()) - 1;
    rep.same_target_fractions.assign(B, 0.0);
    rep.diff_target_fractions.assign(B, 0.0);

    std::vector<double> norms(u);
    std::vector<bool> ok(u);
    for (int j = 0; j < u; ++j) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) { s += deltas.at(i, j) * deltas.at(i, j); }
        norms[j] = std::sqrt(s);
        ok[j] = norms[j] > 0.0;
        if (!ok[j]) { rep.skipped_zero_norm += 1; }
    }
    auto bucket_of = [&](double c) {
        for (int b = 0; b < B; ++b) {
            if (c < bucket_edges[b + 1] || b == B - 1) { return b; }
        }
        return B - 1;
    };
    for (int a = 0; a < u; ++a) {
        if (!ok[a]) { continue; }
        for (int b = a + 1; b < u; ++b) {
            if (!ok[b]) { continue; }
            double dot = 0.0;
            for (int i = 0; i < d; ++i) { dot += deltas.at(i, a) * deltas.at(i, b); }
            const double c = dot / (norms[a] * norms[b]);
            if (target_labels[a] == target_labels[b]) {
                rep.same_target_mean += c;
                rep.same_pairs += 1;
                if (B > 0) { rep.same_target_fractions[bucket_of(c)] += 1.0; }
            } else {
                rep.diff_target_mean += c;
                rep.diff_pairs += 1;
                if (B > 0) { rep.diff_target_fractions[bucket_of(c)] += 1.0; }
            }
        }
    }
    if (rep.same_pairs > 0) {
        rep.same_target_mean /= rep.same_pairs;
        for (double& f : rep.same_target_fractions) { f /= rep.same_pairs; }
    }
    if (rep.diff_pairs > 0) {
        rep.diff_target_mean /= rep.diff_pairs;
        for (double& f : rep.diff_target_fractions) { f /= rep.diff_pairs; }
    }
    return rep;
}

inline void save_similarity_csv(const SimilarityReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_similarity_csv: cannot open " + path); }
    out << "bucket_lo,bucket_hi,same_target_fraction,diff_target_fraction\n";
    char buf[128];
    for (size_t b = 0; b + 1 < rep.bucket_edges.size(); ++b) {
        std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.6f,%.6f\n", rep.bucket_edges[b],
                      rep.bucket_edges[b + 1], rep.same_target_fractions[b], rep.diff_target_fractions[b]);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,,%.6f,%.6f\n", rep.same_target_mean, rep.diff_target_mean);
    out << buf;
}

// runs persisted as CSV: query_index, gold, rank, doc_key, score
inline void save_run_csv(const RetrievalRun& run, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_run_csv: cannot open " + path); }
    out << "query,gold_doc_key,rank,doc_key,score\n";
    char buf[160];
    for (size_t qi = 0; qi < run.results.size(); ++qi) {
        const QueryResult& r = run.results[qi];
        for (size_t i = 0; i < r.ranked.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%ld,%zu,%ld,%.12g\n", qi, r.gold_doc_key, i + 1,
                          r.ranked[i].first, r.ranked[i].second);
            out << buf;
        }
    }
}

} // namespace gred::eval
