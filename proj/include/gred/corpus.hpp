// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gred/common.hpp"

namespace gred::corpus {

using json = nlohmann::json;

struct Document {
    long doc_key = -1;
    std::vector<int> tokens;
    int cluster_id = -1;
    std::vector<double> embedding; // filled by tfidf_embed; not persisted
};

struct Corpus {
    int vocab_size = 0;
    int n_clusters = 0;
    std::vector<Document> docs;

    const Document* find(long doc_key) const {
        for (const Document& d : docs) {
            if (d.doc_key == doc_key) { return &d; }
        }
        return nullptr;
    }
};

enum class QueryKind { natural, pseudo };

struct Query {
    std::vector<int> tokens;
    long gold_doc_key = -1;
    QueryKind kind = QueryKind::natural;
};

struct QuerySet {
    std::vector<Query> queries;

    void validate_against(const Corpus& c) const {
        std::set<long> keys;
        for (const Document& d : c.docs) { keys.insert(d.doc_key); }
        for (const Query& q : queries) {
            if (!keys.count(q.gold_doc_key)) {
                fail(ErrorKind::config, "query references unknown doc_key " + std::to_string(q.gold_doc_key));
            }
        }
    }
};

struct CorpusSplit {
    std::vector<long> initial_keys;
    std::vector<long> new_keys;
};

struct CorpusConfig {
    int n_docs = 2000;
    int n_clusters = 20;
    int vocab_size = 3000;
    int topic_terms = 100;   // cluster-specific vocabulary block size
    int doc_len_min = 30;
    int doc_len_max = 60;
    double noise_mix = 0.3;  // probability a term is drawn uniformly from the whole vocabulary
};

struct QueryGenConfig {
    int len_min = 3;
    int len_max = 8;
    double noise = 0.1; // probability of substituting a random vocabulary term
};

// Synthetic clustered corpus: each cluster owns a contiguous vocabulary block
// with a Zipf-like term distribution; the remainder of each document is
// uniform noise over the full vocabulary.
inline Corpus generate_corpus(const CorpusConfig& cfg, uint64_t seed) {
    if (cfg.n_clusters < 1 || cfg.n_docs < 1 || cfg.n_clusters > cfg.n_docs) {
        fail(ErrorKind::config, "generate_corpus: need 1 <= n_clusters <= n_docs");
    }
    if (cfg.vocab_size <= cfg.n_clusters * cfg.topic_terms) {
        fail(ErrorKind::config, "generate_corpus: vocab_size must exceed n_clusters * topic_terms");
    }
    if (cfg.doc_len_min < 1 || cfg.doc_len_max < cfg.doc_len_min) {
        fail(ErrorKind::config, "generate_corpus: invalid doc length range");
    }
    Corpus out;
    out.vocab_size = cfg.vocab_size;
    out.n_clusters = cfg.n_clusters;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> cluster_dist(0, cfg.n_clusters - 1);
    std::uniform_int_distribution<int> len_dist(cfg.doc_len_min, cfg.doc_len_max);
    std::uniform_int_distribution<int> vocab_dist(0, cfg.vocab_size - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Zipf weights within a topic block
    std::vector<double> topic_cdf(cfg.topic_terms);
    {
        double acc = 0.0;
        for (int r = 0; r < cfg.topic_terms; ++r) {
            acc += 1.0 / (1.0 + r);
            topic_cdf[r] = acc;
        }
        for (double& x : topic_cdf) { x /= acc; }
    }
    auto sample_topic_rank = [&](double u) {
        return static_cast<int>(std::lower_bound(topic_cdf.begin(), topic_cdf.end(), u) - topic_cdf.begin());
    };
    // per-cluster random permutation of its block so rank order differs per cluster
    std::vector<std::vector<int>> cluster_terms(cfg.n_clusters);
    for (int c = 0; c < cfg.n_clusters; ++c) {
        cluster_terms[c].resize(cfg.topic_terms);
        std::iota(cluster_terms[c].begin(), cluster_terms[c].end(), c * cfg.topic_terms);
        std::shuffle(cluster_terms[c].begin(), cluster_terms[c].end(), rng);
    }

    out.docs.reserve(cfg.n_docs);
    for (int i = 0; i < cfg.n_docs; ++i) {
        Document d;
        d.doc_key = i;
        d.cluster_id = cfg.n_docs == 1 ? 0 : cluster_dist(rng);
        const int len = len_dist(rng);
        d.tokens.reserve(len);
        for (int t = 0; t < len; ++t) {
            if (unit(rng) < cfg.noise_mix) {
                d.tokens.push_back(vocab_dist(rng));
            } else {
                d.tokens.push_back(cluster_terms[d.cluster_id][sample_topic_rank(unit(rng))]);
            }
        }
        out.docs.push_back(std::move(d));
    }
    return out;
}

// One L2-normalized TF-IDF vector per document, written into
// Document.embedding. Dimension equals the vocabulary size.
inline void tfidf_embed(Corpus& corpus) {
    if (corpus.docs.empty()) { fail(ErrorKind::config, "tfidf_embed: empty corpus"); }
    const int v = corpus.vocab_size;
    const double n = static_cast<double>(corpus.docs.size());
    std::vector<double> df(v, 0.0);
    for (const Document& d : corpus.docs) {
        std::set<int> seen(d.tokens.begin(), d.tokens.end());
        for (int t : seen) { df[t] += 1.0; }
    }
    std::vector<double> idf(v);
    for (int t = 0; t < v; ++t) { idf[t] = std::log((1.0 + n) / (1.0 + df[t])) + 1.0; }
    for (Document& d : corpus.docs) {
        d.embedding.assign(v, 0.0);
        for (int t : d.tokens) { d.embedding[t] += 1.0; }
        double norm = 0.0;
        for (int t = 0; t < v; ++t) {
            d.embedding[t] *= idf[t];
            norm += d.embedding[t] * d.embedding[t];
        }
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (double& x : d.embedding) { x /= norm; }
        }
    }
}

// TF-weighted term sampling from one document, with a `noise` chance of
// substituting a uniform vocabulary term. Queries are distinct where the
// document's term diversity allows.
inline std::vector<std::vector<int>> gen_pseudo_queries(const Document& doc, int n, int vocab_size,
                                                        const QueryGenConfig& cfg, uint64_t seed) {
    if (n < 1) { fail(ErrorKind::config, "gen_pseudo_queries: n must be >= 1"); }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> len_dist(cfg.len_min, cfg.len_max);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(doc.tokens.size()) - 1);
    std::uniform_int_distribution<int> vocab_dist(0, vocab_size - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<int>> out;
    std::set<std::vector<int>> seen;
    for (int qi = 0; qi < n; ++qi) {
        std::vector<int> q;
        for (int attempt = 0; attempt < 16; ++attempt) {
            const int len = std::min<int>(len_dist(rng), static_cast<int>(doc.tokens.size()));
            q.clear();
            for (int i = 0; i < len; ++i) {
                if (cfg.noise > 0.0 && unit(rng) < cfg.noise) {
                    q.push_back(vocab_dist(rng));
                } else {
                    q.push_back(doc.tokens[pick(rng)]); // TF-weighted: sampling positions weights by count
                }
            }
            if (seen.insert(q).second) { break; }
        }
        out.push_back(std::move(q));
    }
    return out;
}

// Uniform random split into initial/new document sets.
inline CorpusSplit split_corpus(const Corpus& corpus, double new_fraction, uint64_t seed) {
    if (!(new_fraction > 0.0 && new_fraction < 1.0)) {
        fail(ErrorKind::config, "split_corpus: new_fraction must be in (0,1)");
    }
    std::vector<long> keys;
    keys.reserve(corpus.docs.size());
    for (const Document& d : corpus.docs) { keys.push_back(d.doc_key); }
    std::mt19937_64 rng(seed);
    std::shuffle(keys.begin(), keys.end(), rng);
    const size_t n_new = static_cast<size_t>(std::lround(new_fraction * static_cast<double>(keys.size())));
    CorpusSplit split;
    split.new_keys.assign(keys.begin(), keys.begin() + n_new);
    split.initial_keys.assign(keys.begin() + n_new, keys.end());
    std::sort(split.new_keys.begin(), split.new_keys.end());
    std::sort(split.initial_keys.begin(), split.initial_keys.end());
    return split;
}

// ---------------------------------------------------------------------------
// persistence: JSONL, one object per line
// ---------------------------------------------------------------------------

// JSONL of {doc_key, tokens, cluster_id}; corpus-level fields go to a
// sidecar meta file so the record schema stays flat.
inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_corpus: cannot open " + path); }
    for (const Document& d : corpus.docs) {
        out << json{{"doc_key", d.doc_key}, {"tokens", d.tokens}, {"cluster_id", d.cluster_id}}.dump()
            << "\n";
    }
    std::ofstream meta(path + ".meta.json");
    meta << json{{"vocab_size", corpus.vocab_size}, {"n_clusters", corpus.n_clusters}}.dump(2) << "\n";
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) { fail(ErrorKind::io, "load_corpus: cannot open " + path); }
    Corpus out;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) { continue; }
        try {
            json j = json::parse(line);
            Document d;
            d.doc_key = j.at("doc_key").get<long>();
            d.tokens = j.at("tokens").get<std::vector<int>>();
            d.cluster_id = j.at("cluster_id").get<int>();
            out.docs.push_back(std::move(d));
        } catch (const json::exception& e) {
            fail(ErrorKind::io, "load_corpus: malformed line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    std::ifstream meta(path + ".meta.json");
    if (meta) {
        json j = json::parse(meta);
        out.vocab_size = j.at("vocab_size").get<int>();
        out.n_clusters = j.at("n_clusters").get<int>();
    } else {
        for (const Document& d : out.docs) {
            for (int t : d.tokens) { out.vocab_size = std::max(out.vocab_size, t + 1); }
            out.n_clusters = std::max(out.n_clusters, d.cluster_id + 1);
        }
    }
    return out;
}

inline void save_queries(const QuerySet& qs, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_queries: cannot open " + path); }
    for (const Query& q : qs.queries) {
        out << json{{"tokens", q.tokens},
                    {"gold_doc_key", q.gold_doc_key},
                    {"kind", q.kind == QueryKind::natural ? "natural" : "pseudo"}}
                   .dump()
            << "\n";
    }
}

inline QuerySet load_queries(const std::string& path) {
    std::ifstream in(path);
    if (!in) { fail(ErrorKind::io, "load_queries: cannot open " + path); }
    QuerySet out;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) { continue; }
        try {
            json j = json::parse(line);
            Query q;
            q.tokens = j.at("tokens").get<std::vector<int>>();
            q.gold_doc_key = j.at("gold_doc_key").get<long>();
            q.kind = j.at("kind").get<std::string>() == "pseudo" ? QueryKind::pseudo : QueryKind::natural;
            out.queries.push_back(std::move(q));
        } catch (const json::exception& e) {
            fail(ErrorKind::io, "load_queries: malformed line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

// CSV dump of document embeddings (external projection stand-in).
inline void dump_embeddings_csv(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "dump_embeddings_csv: cannot open " + path); }
    out << "doc_key";
    for (int j = 0; j < corpus.vocab_size; ++j) { out << ",v" << j; }
    out << "\n";
    char buf[32];
    for (const Document& d : corpus.docs) {
        out << d.doc_key;
        for (double x : d.embedding) {
            std::snprintf(buf, sizeof(buf), ",%.6g", x);
            out << buf;
        }
        out << "\n";
    }
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) { return 0.0; }
    return dot / std::sqrt(na * nb);
}

} // namespace gred::corpus
