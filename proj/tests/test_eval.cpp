// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "gred/eval.hpp"

using namespace gred;
using namespace gred::eval;
using numerics::Tensor;

namespace {

RetrievalRun run_with_ranks(const std::vector<int>& gold_ranks, int list_len = 20) {
    // gold rank 0 means "absent"
    RetrievalRun run;
    for (size_t qi = 0; qi < gold_ranks.size(); ++qi) {
        QueryResult r;
        r.gold_doc_key = 1000 + static_cast<long>(qi);
        long filler = 1;
        for (int pos = 1; pos <= list_len; ++pos) {
            if (pos == gold_ranks[qi]) {
                r.ranked.emplace_back(r.gold_doc_key, 1.0 / pos);
            } else {
                r.ranked.emplace_back(filler++, 1.0 / pos);
            }
        }
        run.results.push_back(std::move(r));
    }
    return run;
}

} // namespace

TEST_CASE("recall_at_k: hand counts and monotonicity") {
    RetrievalRun run = run_with_ranks({1, 3, 12});
    REQUIRE(recall_at_k(run, 10) == Catch::Approx(2.0 / 3.0));
    RetrievalRun perfect = run_with_ranks({1, 1, 1});
    REQUIRE(recall_at_k(perfect, 1) == 1.0);
    for (int k = 1; k < 19; ++k) { REQUIRE(recall_at_k(run, k) <= recall_at_k(run, k + 1)); }
    REQUIRE_THROWS_WITH(recall_at_k(run, 0), Catch::Matchers::ContainsSubstring("K"));
}

TEST_CASE("mrr_at_k: hand computation, absent gold, cutoff monotonicity") {
    RetrievalRun run = run_with_ranks({1, 2, 4});
    REQUIRE(mrr_at_k(run, 10) == Catch::Approx((1.0 + 0.5 + 0.25) / 3.0));
    RetrievalRun absent = run_with_ranks({0, 0});
    REQUIRE(mrr_at_k(absent, 10) == 0.0);
    for (int k = 1; k < 19; ++k) { REQUIRE(mrr_at_k(run, k) <= mrr_at_k(run, k + 1) + 1e-15); }
}

TEST_CASE("metrics match a brute-force rank oracle on random runs") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> n_q(1, 100);
    std::uniform_int_distribution<int> rank_dist(0, 25); // 0 = absent
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> ranks(n_q(rng));
        for (int& r : ranks) { r = rank_dist(rng); }
        RetrievalRun run = run_with_ranks(ranks, 25);
        run.validate();
        for (int k : {1, 5, 10, 25}) {
            double recall_oracle = 0.0, mrr_oracle = 0.0;
            for (int r : ranks) {
                if (r >= 1 && r <= k) {
                    recall_oracle += 1.0;
                    mrr_oracle += 1.0 / r;
                }
            }
            recall_oracle /= ranks.size();
            mrr_oracle /= ranks.size();
            REQUIRE(recall_at_k(run, k) == Catch::Approx(recall_oracle).margin(1e-12));
            REQUIRE(mrr_at_k(run, k) == Catch::Approx(mrr_oracle).margin(1e-12));
        }
        // re-evaluation is bit-stable
        REQUIRE(recall_at_k(run, 10) == recall_at_k(run, 10));
    }
}

TEST_CASE("run validation rejects unsorted lists and duplicates") {
    RetrievalRun bad;
    QueryResult r;
    r.gold_doc_key = 1;
    r.ranked = {{1, 0.5}, {2, 0.9}};
    bad.results.push_back(r);
    REQUIRE_THROWS_WITH(bad.validate(), Catch::Matchers::ContainsSubstring("sorted"));

    RetrievalRun dup;
    QueryResult r2;
    r2.gold_doc_key = 1;
    r2.ranked = {{3, 0.9}, {3, 0.5}};
    dup.results.push_back(r2);
    REQUIRE_THROWS_WITH(dup.validate(), Catch::Matchers::ContainsSubstring("duplicate"));
}

TEST_CASE("forgetting score and TPD") {
    REQUIRE(forgetting_score(0.886, 0.883) == Catch::Approx(0.003));
    REQUIRE(forgetting_score(0.886, 0.879) == Catch::Approx(0.007));
    REQUIRE(forgetting_score(0.5, 0.5) == 0.0);

    REQUIRE(tpd(214.0, 100) == Catch::Approx(2.14));
    REQUIRE(tpd(214.0, 200) == Catch::Approx(1.07));
    REQUIRE_THROWS_WITH(tpd(10.0, 0), Catch::Matchers::ContainsSubstring("new document"));
}

TEST_CASE("cosine_similarity_stats: identical, orthogonal, zero-norm columns") {
    // columns: two identical (same target), one orthogonal (different target)
    Tensor deltas({3, 4});
    // col0 = col1 = e0 (target 7); col2 = e1 (target 9); col3 = 0 (target 7)
    deltas.ptr()[0 * 4 + 0] = 1.0;
    deltas.ptr()[0 * 4 + 1] = 1.0;
    deltas.ptr()[1 * 4 + 2] = 1.0;
    std::vector<double> edges = {-1.0, 0.0, 0.5, 1.01};
    SimilarityReport rep = cosine_similarity_stats(deltas, {7, 7, 9, 7}, edges);
    REQUIRE(rep.skipped_zero_norm == 1);
    REQUIRE(rep.same_pairs == 1); // only (0,1): col3 excluded
    REQUIRE(rep.same_target_mean == Catch::Approx(1.0));
    REQUIRE(rep.diff_pairs == 2); // (0,2) and (1,2)
    REQUIRE(rep.diff_target_mean == Catch::Approx(0.0).margin(1e-12));
    // bucket fractions sum to 1 per group
    double s = 0.0, d = 0.0;
    for (double f : rep.same_target_fractions) { s += f; }
    for (double f : rep.diff_target_fractions) { d += f; }
    REQUIRE(s == Catch::Approx(1.0));
    REQUIRE(d == Catch::Approx(1.0));

    REQUIRE_THROWS_WITH(cosine_similarity_stats(deltas, {1, 2}, edges),
                        Catch::Matchers::ContainsSubstring("label"));
}
