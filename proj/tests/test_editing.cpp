// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "gred/editing.hpp"
#include "test_util.hpp"

using namespace gred;
using namespace gred::editing;
using grmodel::GrModel;
using grmodel::ModelConfig;
using numerics::Tensor;

namespace {

ModelConfig edit_config(int dec_layers = 6) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 20;
    cfg.enc_layers = 1;
    cfg.dec_layers = dec_layers;
    cfg.term_vocab = 40;
    cfg.docid_K = 4;
    cfg.docid_T = 2;
    cfg.disamb_size = 2;
    cfg.max_src_len = 10;
    cfg.seed = 3;
    return cfg;
}

std::vector<int> tokens_for(const ModelConfig& cfg, int c0, int c1, int dis) {
    const auto v = cfg.vocab();
    return {v.code_token(0, c0), v.code_token(1, c1), v.disamb_token(dis)};
}

std::vector<int> rand_query(const ModelConfig& cfg, std::mt19937_64& rng, int len = 5) {
    std::uniform_int_distribution<int> d(0, cfg.term_vocab - 1);
    std::vector<int> q(len);
    for (int& t : q) { t = d(rng); }
    return q;
}

// lightly pre-trained model: editing operates on models whose output head
// has usable margins, never on raw initializations
GrModel pretrained_model(const ModelConfig& cfg, uint64_t seed,
                         std::vector<std::pair<std::vector<int>, std::vector<int>>>* pairs_out = nullptr) {
    GrModel m = grmodel::init_model(cfg);
    std::mt19937_64 rng(seed);
    std::vector<grmodel::TrainBatch> data;
    for (int i = 0; i < 30; ++i) {
        std::uniform_int_distribution<int> d(0, cfg.term_vocab - 1);
        std::vector<int> q(5);
        for (int& t : q) { t = d(rng); }
        auto tokens = tokens_for(cfg, i % cfg.docid_K, (i / 4) % cfg.docid_K, 0);
        data.push_back({q, tokens, grmodel::TaskTag::query2id});
        if (pairs_out) { pairs_out->emplace_back(q, tokens); }
    }
    grmodel::TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 8;
    tc.lr = 2e-3;
    grmodel::train(m, data, tc);
    return m;
}

// gradient-descent minimizer of ||(W+D)K1 - V1||^2 + ||D K0||^2; the
// independent oracle for the closed-form update
Tensor gd_minimize_update(const Tensor& w, const Tensor& k1, const Tensor& v1, const Tensor& k0,
                          long iters = 200000) {
    using namespace numerics;
    NoGradGuard ng;
    const int d1 = w.rows(), d0 = w.cols();
    Tensor gram = gram_cols(k1);
    if (k0.defined() && k0.numel() > 0) {
        Tensor g0 = gram_cols(k0);
        for (long i = 0; i < gram.numel(); ++i) { gram.ptr()[i] += g0.at(i); }
    }
    // Lipschitz constant of the gradient: 2 lambda_max(gram), via power iteration
    std::vector<double> x(d0, 1.0);
    double lam = 1.0;
    for (int it = 0; it < 200; ++it) {
        std::vector<double> y(d0, 0.0);
        for (int i = 0; i < d0; ++i) {
            for (int j = 0; j < d0; ++j) { y[i] += gram.at(i, j) * x[j]; }
        }
        double norm = 0.0;
        for (double v : y) { norm += v * v; }
        norm = std::sqrt(norm);
        if (norm == 0.0) { break; }
        lam = norm;
        for (int i = 0; i < d0; ++i) { x[i] = y[i] / norm; }
    }
    const double step = 1.0 / (2.0 * lam + 1e-12);
    Tensor delta({d1, d0});
    Tensor r0 = mat_product(w, k1);
    for (long i = 0; i < r0.numel(); ++i) { r0.ptr()[i] = v1.at(i) - r0.at(i); } // V1 - W K1
    Tensor rk = mat_product(r0, transpose(k1));
    for (long it = 0; it < iters; ++it) {
        // grad = 2 (D gram - rk)
        Tensor dg = mat_product(delta, gram);
        double gnorm = 0.0;
        for (long i = 0; i < delta.numel(); ++i) {
            const double g = 2.0 * (dg.at(i) - rk.at(i));
            delta.ptr()[i] -= step * g;
            gnorm += g * g;
        }
        if (gnorm < 1e-26) { break; }
    }
    return delta;
}

} // namespace

TEST_CASE("build_edit_requests: prefixes, counting, trie validity") {
    ModelConfig cfg = edit_config();
    std::mt19937_64 rng(1);
    SECTION("1 doc, 1 query, 3 positions") {
        NewDocSupervision d;
        d.doc_key = 42;
        d.docid_tokens = tokens_for(cfg, 1, 2, 0);
        d.pseudo_queries = {rand_query(cfg, rng)};
        auto reqs = build_edit_requests({d});
        REQUIRE(reqs.size() == 3);
        REQUIRE(reqs[0].prefix.empty());
        REQUIRE(reqs[1].prefix == std::vector<int>{d.docid_tokens[0]});
        REQUIRE(reqs[2].prefix == std::vector<int>{d.docid_tokens[0], d.docid_tokens[1]});
        for (int t = 0; t < 3; ++t) {
            REQUIRE(reqs[t].target == d.docid_tokens[t]);
            REQUIRE(reqs[t].position == t);
            REQUIRE(reqs[t].doc_key == 42);
        }
    }
    SECTION("200 docs x 10 queries x 3 positions = 6000 requests, all trie-valid") {
        docid::DocIdTrie trie;
        std::vector<NewDocSupervision> docs;
        for (int i = 0; i < 200; ++i) {
            NewDocSupervision d;
            d.doc_key = i;
            d.docid_tokens = tokens_for(cfg, i % 4, (i / 4) % 4, i / 16);
            if (!trie.contains(d.docid_tokens)) { trie.insert(d.docid_tokens, i); }
            for (int qi = 0; qi < 10; ++qi) { d.pseudo_queries.push_back(rand_query(cfg, rng)); }
            docs.push_back(std::move(d));
        }
        auto reqs = build_edit_requests(docs);
        REQUIRE(reqs.size() == 6000);
        for (const auto& r : reqs) {
            auto valid = trie.valid_next(r.prefix);
            REQUIRE(std::find(valid.begin(), valid.end(), r.target) != valid.end());
        }
    }
    SECTION("doc without docID is an error") {
        NewDocSupervision d;
        d.doc_key = 7;
        d.pseudo_queries = {rand_query(cfg, rng)};
        REQUIRE_THROWS_WITH(build_edit_requests({d}), Catch::Matchers::ContainsSubstring("docID"));
    }
}

TEST_CASE("extract_keys: identical requests give identical columns; matches tapped forward; ReLU >= 0") {
    ModelConfig cfg = edit_config();
    GrModel m = init_model(cfg);
    std::mt19937_64 rng(5);
    EditRequest r;
    r.query = rand_query(cfg, rng);
    r.prefix = {cfg.vocab().code_token(0, 2)};
    r.target = cfg.vocab().code_token(1, 1);
    r.position = 1;
    std::vector<EditRequest> reqs = {r, r};
    const int layer = 3;
    Tensor k = extract_keys(m, reqs, layer);
    REQUIRE(k.shape() == numerics::Shape{cfg.d_ffn, 2});
    for (int i = 0; i < cfg.d_ffn; ++i) {
        REQUIRE(k.at(i, 0) == k.at(i, 1));
        REQUIRE(k.at(i, 0) >= 0.0); // ReLU keys
    }
    // matches the ffn_key tap of grmodel::forward on the same request
    grmodel::ForwardOptions opt;
    opt.taps.push_back({layer, grmodel::Module::ffn_key, r.position});
    grmodel::DecodeResult dec = grmodel::forward(m, r.query, r.prefix, opt);
    const Tensor& cap = dec.captures.at({layer, grmodel::Module::ffn_key, r.position});
    for (int i = 0; i < cfg.d_ffn; ++i) { REQUIRE(k.at(i, 0) == cap.at(0, i)); }
}

TEST_CASE("collect_preserved_keys: single column, determinism, distinct from request keys") {
    ModelConfig cfg = edit_config();
    GrModel m = init_model(cfg);
    std::mt19937_64 rng(9);
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
    for (int i = 0; i < 10; ++i) {
        pairs.emplace_back(rand_query(cfg, rng), tokens_for(cfg, i % 4, (i + 1) % 4, 0));
    }
    Tensor one = collect_preserved_keys(m, pairs, 2, 1, 11);
    REQUIRE(one.shape() == numerics::Shape{cfg.d_ffn, 1});
    Tensor again = collect_preserved_keys(m, pairs, 2, 1, 11);
    REQUIRE(one.vec() == again.vec());

    Tensor k0 = collect_preserved_keys(m, pairs, 2, 8, 11);
    EditRequest r;
    r.query = rand_query(cfg, rng);
    r.prefix = {};
    r.target = cfg.vocab().code_token(0, 0);
    r.position = 0;
    Tensor k1 = extract_keys(m, {r}, 2);
    // distinct contexts produce distinct key columns
    for (int c = 0; c < k0.cols(); ++c) {
        bool same = true;
        for (int i = 0; i < cfg.d_ffn && same; ++i) { same = k0.at(i, c) == k1.at(i, 0); }
        REQUIRE_FALSE(same);
    }
}

TEST_CASE("lambda_schedule: endpoints, midpoint arithmetic, monotone, errors, constant mode") {
    HybridSchedule s;
    s.lambda0 = 0.3;
    s.steps = 50;
    REQUIRE(lambda_schedule(0, s) == Catch::Approx(0.3));
    REQUIRE(lambda_schedule(49, s) == Catch::Approx(1.0));
    REQUIRE(lambda_schedule(24, s) == Catch::Approx(0.3 + 0.7 * 24.0 / 49.0));
    for (int step = 1; step < 50; ++step) {
        REQUIRE(lambda_schedule(step, s) >= lambda_schedule(step - 1, s));
    }
    REQUIRE_THROWS_WITH(lambda_schedule(-1, s), Catch::Matchers::ContainsSubstring("step"));
    REQUIRE_THROWS_WITH(lambda_schedule(50, s), Catch::Matchers::ContainsSubstring("step"));

    HybridSchedule hard = HybridSchedule::constant(1.0, 50);
    HybridSchedule soft = HybridSchedule::constant(0.3, 50);
    for (int step = 0; step < 50; ++step) {
        REQUIRE(lambda_schedule(step, hard) == 1.0);
        REQUIRE(lambda_schedule(step, soft) == 0.3);
    }
}

TEST_CASE("hybrid_target: endpoints, hand evaluation, normalization guard, distribution property") {
    std::vector<double> uniform = {0.25, 0.25, 0.25, 0.25};
    auto hard = hybrid_target(uniform, 2, 1.0);
    REQUIRE(hard == std::vector<double>{0.0, 0.0, 1.0, 0.0});
    auto soft = hybrid_target(uniform, 2, 0.0);
    REQUIRE(soft == uniform);
    auto mixed = hybrid_target(uniform, 2, 0.3);
    REQUIRE(mixed[0] == Catch::Approx(0.175));
    REQUIRE(mixed[1] == Catch::Approx(0.175));
    REQUIRE(mixed[2] == Catch::Approx(0.475));
    REQUIRE(mixed[3] == Catch::Approx(0.175));

    std::vector<double> bad = {0.5, 0.6};
    REQUIRE_THROWS_WITH(hybrid_target(bad, 0, 0.5), Catch::Matchers::ContainsSubstring("normalized"));

    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(6);
        double s = 0.0;
        for (double& x : p) {
            x = u(rng);
            s += x;
        }
        for (double& x : p) { x /= s; }
        const double lambda = u(rng);
        auto out = hybrid_target(p, trial % 6, lambda);
        double sum = 0.0;
        for (double x : out) {
            REQUIRE(x >= 0.0);
            sum += x;
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("suffix cache reproduces the full forward logits at the decoding row") {
    ModelConfig cfg = edit_config();
    GrModel m = init_model(cfg);
    std::mt19937_64 rng(17);
    for (int t : {0, 1, 2}) {
        std::vector<EditRequest> reqs;
        for (int i = 0; i < 3; ++i) {
            EditRequest r;
            r.query = rand_query(cfg, rng);
            auto tokens = tokens_for(cfg, i % 4, (i + 2) % 4, 0);
            r.prefix.assign(tokens.begin(), tokens.begin() + t);
            r.target = tokens[t];
            r.position = t;
            reqs.push_back(std::move(r));
        }
        const int layer_l = 3;
        SuffixCache cache = build_suffix_cache(m, reqs, {0, 1, 2}, layer_l);
        numerics::NoGradGuard ng;
        Tensor logits = suffix_logits(m, cache, cache.m_orig.detach());
        for (int b = 0; b < 3; ++b) {
            grmodel::DecodeResult full = grmodel::forward(m, reqs[b].query, reqs[b].prefix);
            const double* frow = full.logits.ptr() + static_cast<long>(t) * cfg.vocab().size();
            for (int v = 0; v < cfg.vocab().size(); ++v) {
                REQUIRE(logits.at(b, v) == Catch::Approx(frow[v]).margin(1e-12));
            }
        }
    }
}

TEST_CASE("optimize_delta: near-fixed point keeps delta tiny") {
    ModelConfig cfg = edit_config();
    GrModel m = init_model(cfg);
    std::mt19937_64 rng(19);
    EditRequest r;
    r.query = rand_query(cfg, rng);
    auto tokens = tokens_for(cfg, 2, 1, 0);
    r.prefix = {};
    r.target = tokens[0];
    r.position = 0;
    // force p(y_t) to 1 within 1e-6 by boosting the output bias
    m.param("out_bias").ptr()[r.target] += 16.0;
    auto probs = grmodel::gold_token_probs(m, r.query, tokens);
    REQUIRE(probs[0] > 1.0 - 1e-6);

    HybridSchedule sched;
    DeltaResult res = optimize_delta(m, r, cfg.dec_layers - 1, sched);
    double norm = 0.0;
    for (double x : res.delta) { norm += x * x; }
    REQUIRE(std::sqrt(norm) < 1e-3);
}

TEST_CASE("optimize_delta: step-0 gradient matches finite differences through the suffix") {
    ModelConfig cfg = edit_config();
    GrModel m = init_model(cfg);
    std::mt19937_64 rng(23);
    EditRequest r;
    r.query = rand_query(cfg, rng);
    auto tokens = tokens_for(cfg, 1, 3, 1);
    r.prefix = {tokens[0]};
    r.target = tokens[1];
    r.position = 1;
    const int layer_l = 3;
    SuffixCache cache = build_suffix_cache(m, {r}, {0}, layer_l);
    const auto vocab = cfg.vocab();
    const int V = vocab.size();
    const double lambda = 0.3;
    Tensor target({1, V});
    for (int v = 0; v < V; ++v) {
        target.ptr()[v] = (1.0 - lambda) * cache.p_orig.at(0, v) + (v == r.target ? lambda : 0.0);
    }
    Tensor mask({1, V}, -1e30);
    for (int v = vocab.segment(1).first; v < vocab.segment(1).second; ++v) { mask.ptr()[v] = 0.0; }

    Tensor delta({1, cfg.d_model}, 0.0, true);
    auto loss_of = [&](const Tensor& dlt) {
        Tensor values = numerics::add(cache.m_orig.detach(), dlt);
        Tensor logits = suffix_logits(m, cache, values);
        return numerics::sum(numerics::cross_entropy_rows(numerics::add(logits, mask), target));
    };
    Tensor loss = loss_of(delta);
    numerics::backward(loss);
    auto f = [&] {
        numerics::NoGradGuard ng;
        return loss_of(delta.detach()).at(0);
    };
    auto numeric = gred::testutil::finite_diff(f, delta);
    REQUIRE(gred::testutil::max_rel_err(delta.grad(), numeric) < 1e-4);
}

TEST_CASE("optimize_delta raises the hard-label probability for an unseen mapping") {
    ModelConfig cfg = edit_config();
    GrModel m = pretrained_model(cfg, 29);
    std::mt19937_64 rng(29);
    EditRequest r;
    r.query = rand_query(cfg, rng);
    auto tokens = tokens_for(cfg, 0, 2, 1); // disambiguator 1 never appears in training
    r.prefix = {tokens[0], tokens[1]};
    r.target = tokens[2];
    r.position = 2;
    HybridSchedule sched;
    DeltaResult res = optimize_delta(m, r, cfg.dec_layers - 1, sched);
    REQUIRE(res.final_gold_prob > res.initial_gold_prob);
    REQUIRE(res.final_gold_prob > 0.5); // lambda ends at 1.0: target is the hard label
    REQUIRE(res.loss_trace.front() > res.loss_trace.back());
}

TEST_CASE("compute_update: zero residual, exact interpolation, singular-gram error") {
    std::mt19937_64 rng(31);
    const int d1 = 6, d0 = 4;
    Tensor w = gred::testutil::random_tensor({d1, d0}, rng);
    SECTION("V1 = W K1 gives Delta = 0") {
        Tensor k1 = gred::testutil::random_tensor({d0, 3}, rng);
        Tensor v1 = numerics::mat_product(w, k1);
        Tensor k0 = gred::testutil::random_tensor({d0, 5}, rng);
        Tensor delta = compute_update(w, k1, v1, k0, 1e-9);
        for (long i = 0; i < delta.numel(); ++i) { REQUIRE(std::abs(delta.at(i)) < 1e-8); }
    }
    SECTION("empty K0, square invertible K1: exact interpolation") {
        Tensor k1 = gred::testutil::random_tensor({d0, d0}, rng);
        for (int i = 0; i < d0; ++i) { k1.ptr()[i * d0 + i] += 2.0; } // well-conditioned
        Tensor v1 = gred::testutil::random_tensor({d1, d0}, rng);
        Tensor delta = compute_update(w, k1, v1, Tensor(), 0.0);
        Tensor w_new = Tensor::from(w.shape(), w.vec());
        for (long i = 0; i < w.numel(); ++i) { w_new.ptr()[i] += delta.at(i); }
        Tensor fit = numerics::mat_product(w_new, k1);
        for (long i = 0; i < fit.numel(); ++i) { REQUIRE(fit.at(i) == Catch::Approx(v1.at(i)).margin(1e-8)); }
    }
    SECTION("singular gram with eps=0 suggests eps > 0") {
        Tensor k1({d0, 1});
        k1.ptr()[0] = 1.0; // rank-1 gram
        Tensor v1 = gred::testutil::random_tensor({d1, 1}, rng);
        REQUIRE_THROWS_WITH(compute_update(w, k1, v1, Tensor(), 0.0),
                            Catch::Matchers::ContainsSubstring("eps"));
    }
}

TEST_CASE("compute_update matches a gradient-descent minimizer on random instances") {
    std::mt19937_64 rng(37);
    for (int trial = 0; trial < 5; ++trial) {
        const int d1 = 6, d0 = 4, u = 2, n0 = 5;
        Tensor w = gred::testutil::random_tensor({d1, d0}, rng);
        Tensor k1 = gred::testutil::random_tensor({d0, u}, rng);
        Tensor v1 = gred::testutil::random_tensor({d1, u}, rng);
        Tensor k0 = gred::testutil::random_tensor({d0, n0}, rng);
        Tensor closed = compute_update(w, k1, v1, k0, 0.0);
        Tensor gd = gd_minimize_update(w, k1, v1, k0);
        double err = 0.0;
        for (long i = 0; i < closed.numel(); ++i) {
            const double diff = closed.at(i) - gd.at(i);
            err += diff * diff;
        }
        REQUIRE(std::sqrt(err) < 1e-5);
    }
}

TEST_CASE("compute_update optimality: random perturbations never improve the objective") {
    std::mt19937_64 rng(41);
    const int d1 = 5, d0 = 4, u = 3, n0 = 6;
    Tensor w = gred::testutil::random_tensor({d1, d0}, rng);
    Tensor k1 = gred::testutil::random_tensor({d0, u}, rng);
    Tensor v1 = gred::testutil::random_tensor({d1, u}, rng);
    Tensor k0 = gred::testutil::random_tensor({d0, n0}, rng);
    Tensor delta = compute_update(w, k1, v1, k0, 0.0);
    const double base = update_objective(w, delta, k1, v1, k0);
    std::normal_distribution<double> widthn(0.0, 1.0);
    for (int p = 0; p < 100; ++p) {
        Tensor perturbed = Tensor::from(delta.shape(), delta.vec());
        double norm = 0.0;
        std::vector<double> dir(delta.numel());
        for (double& x : dir) {
            x = widthn(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (long i = 0; i < perturbed.numel(); ++i) { perturbed.ptr()[i] += 1e-3 * dir[i] / norm; }
        REQUIRE(update_objective(w, perturbed, k1, v1, k0) >= base - 1e-9);
    }
}

TEST_CASE("apply_dome: single-layer window reduces to one full-residual stage") {
    ModelConfig cfg = edit_config();
    std::vector<std::pair<std::vector<int>, std::vector<int>>> trained_pairs;
    GrModel m = pretrained_model(cfg, 43, &trained_pairs);
    std::mt19937_64 rng(43);
    std::vector<NewDocSupervision> docs;
    for (int i = 0; i < 2; ++i) {
        NewDocSupervision d;
        d.doc_key = 100 + i;
        d.docid_tokens = tokens_for(cfg, 3, i, 1);
        d.pseudo_queries = {rand_query(cfg, rng), rand_query(cfg, rng)};
        docs.push_back(std::move(d));
    }
    auto reqs = build_edit_requests(docs);
    const auto& pairs = trained_pairs;

    DomeConfig dc;
    dc.n0 = 6;
    dc.seed = 7;
    const int l = cfg.dec_layers - 1;
    GrModel edited = m.clone();
    EditPlan plan = apply_dome(edited, reqs, pairs, l, l, dc);
    REQUIRE(plan.stages.size() == 1);
    REQUIRE(plan.stages[0].dist_factor == 1.0);
    REQUIRE(plan.stages[0].layer == l);
    REQUIRE(plan.residual_norm_after < plan.residual_norm_before);
}

TEST_CASE("apply_dome: window scaling factors, residual progress, preservation, accuracy gain") {
    ModelConfig cfg = edit_config(6);
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
    GrModel base = pretrained_model(cfg, 47, &pairs);
    std::mt19937_64 rng(47);

    // new documents use unseen disambiguators
    std::vector<NewDocSupervision> docs;
    for (int i = 0; i < 3; ++i) {
        NewDocSupervision d;
        d.doc_key = 500 + i;
        d.docid_tokens = tokens_for(cfg, i % 4, (i + 1) % 4, 1);
        for (int qi = 0; qi < 3; ++qi) { d.pseudo_queries.push_back(rand_query(cfg, rng)); }
        docs.push_back(std::move(d));
    }
    auto reqs = build_edit_requests(docs);

    DomeConfig dc;
    dc.n0 = 20;
    dc.seed = 3;
    const int hi = cfg.dec_layers - 1;
    const int lo = hi - 4;
    GrModel edited = base.clone();
    EditPlan plan = apply_dome(edited, reqs, pairs, lo, hi, dc);

    REQUIRE(plan.stages.size() == 5);
    for (int s = 0; s < 5; ++s) {
        REQUIRE(plan.stages[s].layer == lo + s);
        REQUIRE(plan.stages[s].dist_factor == Catch::Approx(1.0 / (hi - (lo + s) + 1)));
    }
    REQUIRE(plan.stages[0].dist_factor == Catch::Approx(0.2));
    REQUIRE(plan.stages[4].dist_factor == Catch::Approx(1.0));
    REQUIRE(plan.residual_norm_after < plan.residual_norm_before);

    // edits act more on request keys than preserved keys
    for (const StageDiag& s : plan.stages) { REQUIRE(s.drift_k0 < s.fit_k1); }

    // teacher-forced full-sequence accuracy on edit queries strictly increases
    auto seq_correct = [&](const GrModel& model) {
        int correct = 0;
        for (const auto& d : docs) {
            for (const auto& q : d.pseudo_queries) {
                std::vector<std::pair<std::vector<int>, std::vector<int>>> one = {{q, d.docid_tokens}};
                bool whole = true;
                for (int t = 0; t < cfg.tgt_len(); ++t) {
                    if (grmodel::token_accuracy(model, one, t) < 1.0) {
                        whole = false;
                        break;
                    }
                }
                correct += whole ? 1 : 0;
            }
        }
        return correct;
    };
    const int before = seq_correct(base);
    const int after = seq_correct(edited);
    REQUIRE(after > before);

    // edited model predicts edit-request targets with higher probability
    double mean_before = 0.0, mean_after = 0.0;
    for (size_t i = 0; i < reqs.size(); ++i) {
        mean_before += plan.initial_gold_prob[i];
        mean_after += plan.final_gold_prob[i];
    }
    REQUIRE(mean_after > mean_before);
}

TEST_CASE("apply_dome: sequential per-doc mode matches batch on request metadata") {
    ModelConfig cfg = edit_config(6);
    std::vector<std::pair<std::vector<int>, std::vector<int>>> trained_pairs;
    GrModel base = pretrained_model(cfg, 53, &trained_pairs);
    std::mt19937_64 rng(53);
    std::vector<NewDocSupervision> docs;
    for (int i = 0; i < 2; ++i) {
        NewDocSupervision d;
        d.doc_key = 900 + i;
        d.docid_tokens = tokens_for(cfg, i, i, 1);
        d.pseudo_queries = {rand_query(cfg, rng)};
        docs.push_back(std::move(d));
    }
    auto reqs = build_edit_requests(docs);
    const auto& pairs = trained_pairs;
    DomeConfig dc;
    dc.n0 = 5;
    dc.sequential_per_doc = true;
    GrModel edited = base.clone();
    EditPlan plan = apply_dome(edited, reqs, pairs, 2, cfg.dec_layers - 1, dc);
    REQUIRE(plan.delta_targets.size() == reqs.size());
    for (size_t i = 0; i < reqs.size(); ++i) {
        REQUIRE(plan.delta_targets[i] == reqs[i].target);
        REQUIRE(plan.delta_doc_keys[i] == reqs[i].doc_key);
    }
    // two docs, 4-layer window each: stages recorded per pass
    REQUIRE(plan.stages.size() == 2 * (cfg.dec_layers - 1 - 2 + 1));
}
