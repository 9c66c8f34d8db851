// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "gred/corpus.hpp"

using namespace gred;
using namespace gred::corpus;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("generate_corpus: counts, cluster balance, determinism") {
    CorpusConfig cfg;
    cfg.n_docs = 2000;
    cfg.n_clusters = 20;
    Corpus c = generate_corpus(cfg, 7);
    REQUIRE(c.docs.size() == 2000);
    std::vector<int> per_cluster(20, 0);
    for (const Document& d : c.docs) {
        REQUIRE(d.cluster_id >= 0);
        REQUIRE(d.cluster_id < 20);
        REQUIRE(!d.tokens.empty());
        for (int t : d.tokens) {
            REQUIRE(t >= 0);
            REQUIRE(t < cfg.vocab_size);
        }
        per_cluster[d.cluster_id] += 1;
    }
    // ~100 per cluster under uniform assignment
    for (int n : per_cluster) {
        REQUIRE(n > 50);
        REQUIRE(n < 160);
    }

    Corpus c2 = generate_corpus(cfg, 7);
    REQUIRE(c.docs.size() == c2.docs.size());
    for (size_t i = 0; i < c.docs.size(); ++i) {
        REQUIRE(c.docs[i].tokens == c2.docs[i].tokens);
        REQUIRE(c.docs[i].cluster_id == c2.docs[i].cluster_id);
    }

    CorpusConfig single = cfg;
    single.n_docs = 1;
    single.n_clusters = 1;
    Corpus one = generate_corpus(single, 3);
    REQUIRE(one.docs.size() == 1);
    REQUIRE(one.docs[0].cluster_id == 0);

    CorpusConfig bad = cfg;
    bad.vocab_size = 10;
    REQUIRE_THROWS_WITH(generate_corpus(bad, 1), Catch::Matchers::ContainsSubstring("vocab_size"));
}

TEST_CASE("tfidf_embed: identical docs, cluster structure, disjoint vocab") {
    CorpusConfig cfg;
    cfg.n_docs = 300;
    cfg.n_clusters = 6;
    cfg.vocab_size = 1200;
    Corpus c = generate_corpus(cfg, 11);
    // plant two identical documents
    c.docs[1].tokens = c.docs[0].tokens;
    c.docs[1].cluster_id = c.docs[0].cluster_id;
    tfidf_embed(c);
    REQUIRE(cosine(c.docs[0].embedding, c.docs[1].embedding) == Catch::Approx(1.0).margin(1e-12));

    // same-cluster mean cosine exceeds cross-cluster mean cosine
    double same = 0.0, cross = 0.0;
    long n_same = 0, n_cross = 0;
    for (size_t i = 0; i < c.docs.size(); i += 3) {
        for (size_t j = i + 1; j < c.docs.size(); j += 3) {
            const double cs = cosine(c.docs[i].embedding, c.docs[j].embedding);
            if (c.docs[i].cluster_id == c.docs[j].cluster_id) {
                same += cs;
                ++n_same;
            } else {
                cross += cs;
                ++n_cross;
            }
        }
    }
    REQUIRE(n_same > 0);
    REQUIRE(same / n_same > cross / n_cross);

    // empty token intersection -> cosine 0
    Corpus tiny;
    tiny.vocab_size = 10;
    tiny.n_clusters = 1;
    tiny.docs.push_back({0, {1, 2, 3}, 0, {}});
    tiny.docs.push_back({1, {7, 8, 9}, 0, {}});
    tfidf_embed(tiny);
    REQUIRE(cosine(tiny.docs[0].embedding, tiny.docs[1].embedding) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("gen_pseudo_queries: contract and determinism") {
    CorpusConfig cfg;
    cfg.n_docs = 1;
    cfg.n_clusters = 1;
    cfg.doc_len_min = 200;
    cfg.doc_len_max = 200;
    Corpus c = generate_corpus(cfg, 5);
    QueryGenConfig qcfg;

    SECTION("noise=0 queries are subsets of the document") {
        QueryGenConfig nn = qcfg;
        nn.noise = 0.0;
        auto qs = gen_pseudo_queries(c.docs[0], 1, cfg.vocab_size, nn, 9);
        REQUIRE(qs.size() == 1);
        std::set<int> doc_terms(c.docs[0].tokens.begin(), c.docs[0].tokens.end());
        for (int t : qs[0]) { REQUIRE(doc_terms.count(t) == 1); }
    }

    SECTION("n=10 on a 200-token document: lengths within 3..8, all distinct") {
        auto qs = gen_pseudo_queries(c.docs[0], 10, cfg.vocab_size, qcfg, 9);
        REQUIRE(qs.size() == 10);
        std::set<std::vector<int>> uniq;
        for (const auto& q : qs) {
            REQUIRE(q.size() >= 3);
            REQUIRE(q.size() <= 8);
            uniq.insert(q);
        }
        REQUIRE(uniq.size() == 10);
    }

    SECTION("same seed gives identical query sets") {
        auto a = gen_pseudo_queries(c.docs[0], 5, cfg.vocab_size, qcfg, 42);
        auto b = gen_pseudo_queries(c.docs[0], 5, cfg.vocab_size, qcfg, 42);
        REQUIRE(a == b);
    }
}

TEST_CASE("pseudo-queries retrieve their source above chance with a term-overlap ranker") {
    CorpusConfig cfg;
    cfg.n_docs = 200;
    cfg.n_clusters = 8;
    cfg.vocab_size = 1000;
    Corpus c = generate_corpus(cfg, 13);
    QueryGenConfig qcfg;
    int hits = 0, total = 0;
    for (int i = 0; i < 50; ++i) {
        auto qs = gen_pseudo_queries(c.docs[i], 1, cfg.vocab_size, qcfg, 100 + i);
        // rank docs by length-normalized term overlap
        int best_doc = -1;
        double best_score = -1.0;
        for (const Document& d : c.docs) {
            std::set<int> terms(d.tokens.begin(), d.tokens.end());
            double score = 0.0;
            for (int t : qs[0]) { score += terms.count(t) ? 1.0 : 0.0; }
            score /= std::sqrt(static_cast<double>(terms.size()));
            if (score > best_score) {
                best_score = score;
                best_doc = static_cast<int>(d.doc_key);
            }
        }
        hits += best_doc == i ? 1 : 0;
        ++total;
    }
    // chance would be 1/200; require far above
    REQUIRE(static_cast<double>(hits) / total > 0.3);
}

TEST_CASE("split_corpus: ratio, disjointness, coverage, determinism") {
    CorpusConfig cfg;
    cfg.n_docs = 2000;
    cfg.n_clusters = 10;
    Corpus c = generate_corpus(cfg, 21);
    CorpusSplit s = split_corpus(c, 0.1, 3);
    REQUIRE(s.initial_keys.size() == 1800);
    REQUIRE(s.new_keys.size() == 200);
    std::set<long> all(s.initial_keys.begin(), s.initial_keys.end());
    REQUIRE(all.size() == 1800);
    for (long k : s.new_keys) { REQUIRE(all.insert(k).second); }
    REQUIRE(all.size() == 2000);

    CorpusSplit s2 = split_corpus(c, 0.1, 3);
    REQUIRE(s.initial_keys == s2.initial_keys);
    REQUIRE(s.new_keys == s2.new_keys);

    REQUIRE_THROWS_WITH(split_corpus(c, 0.0, 1), Catch::Matchers::ContainsSubstring("new_fraction"));
    REQUIRE_THROWS_WITH(split_corpus(c, 1.0, 1), Catch::Matchers::ContainsSubstring("new_fraction"));
}

TEST_CASE("corpus JSONL round-trip") {
    CorpusConfig cfg;
    cfg.n_docs = 50;
    cfg.n_clusters = 5;
    cfg.vocab_size = 600;
    Corpus c = generate_corpus(cfg, 17);
    const std::string path = temp_path("gred_corpus_test.jsonl");
    save_corpus(c, path);
    Corpus back = load_corpus(path);
    REQUIRE(back.vocab_size == c.vocab_size);
    REQUIRE(back.n_clusters == c.n_clusters);
    REQUIRE(back.docs.size() == c.docs.size());
    for (size_t i = 0; i < c.docs.size(); ++i) {
        REQUIRE(back.docs[i].doc_key == c.docs[i].doc_key);
        REQUIRE(back.docs[i].tokens == c.docs[i].tokens);
        REQUIRE(back.docs[i].cluster_id == c.docs[i].cluster_id);
    }

    SECTION("truncated file reports the offending line") {
        std::ifstream in(path);
        std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::string cut = content.substr(0, content.size() / 2);
        // cut mid-record so the final line is malformed
        const std::string tpath = temp_path("gred_corpus_trunc.jsonl");
        std::ofstream out(tpath);
        out << cut;
        out.close();
        std::filesystem::remove(tpath + ".meta.json");
        REQUIRE_THROWS_WITH(load_corpus(tpath), Catch::Matchers::ContainsSubstring("line"));
        std::remove(tpath.c_str());
    }

    SECTION("empty file loads as empty corpus") {
        const std::string epath = temp_path("gred_corpus_empty.jsonl");
        std::ofstream out(epath);
        out.close();
        std::filesystem::remove(epath + ".meta.json");
        Corpus empty = load_corpus(epath);
        REQUIRE(empty.docs.empty());
        std::remove(epath.c_str());
    }
    std::remove(path.c_str());
    std::filesystem::remove(path + ".meta.json");
}

TEST_CASE("query set round-trip and gold validation") {
    Corpus c;
    c.vocab_size = 100;
    c.n_clusters = 1;
    c.docs.push_back({0, {1, 2}, 0, {}});
    QuerySet qs;
    qs.queries.push_back({{1, 2, 3}, 0, QueryKind::natural});
    qs.queries.push_back({{4, 5}, 0, QueryKind::pseudo});
    const std::string path = temp_path("gred_queries_test.jsonl");
    save_queries(qs, path);
    QuerySet back = load_queries(path);
    REQUIRE(back.queries.size() == 2);
    REQUIRE(back.queries[0].tokens == qs.queries[0].tokens);
    REQUIRE(back.queries[1].kind == QueryKind::pseudo);
    back.validate_against(c);
    back.queries[0].gold_doc_key = 99;
    REQUIRE_THROWS_WITH(back.validate_against(c), Catch::Matchers::ContainsSubstring("doc_key"));
    std::remove(path.c_str());
}
