// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "gred/patching.hpp"

using namespace gred;
using namespace gred::patching;
using grmodel::GrModel;
using grmodel::ModelConfig;
using grmodel::Module;

namespace {

ModelConfig patch_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 20;
    cfg.enc_layers = 1;
    cfg.dec_layers = 6;
    cfg.term_vocab = 40;
    cfg.docid_K = 4;
    cfg.docid_T = 2;
    cfg.disamb_size = 2;
    cfg.max_src_len = 10;
    cfg.seed = 5;
    return cfg;
}

std::vector<LabeledQuery> random_labeled(const ModelConfig& cfg, int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> term(0, cfg.term_vocab - 1);
    std::uniform_int_distribution<int> code(0, cfg.docid_K - 1);
    std::uniform_int_distribution<int> dis(0, cfg.disamb_size - 1);
    const auto vocab = cfg.vocab();
    std::vector<LabeledQuery> out;
    for (int i = 0; i < n; ++i) {
        std::vector<int> q(5);
        for (int& t : q) { t = term(rng); }
        std::vector<int> tgt = {vocab.code_token(0, code(rng)), vocab.code_token(1, code(rng)),
                                vocab.disamb_token(dis(rng))};
        out.emplace_back(std::move(q), std::move(tgt));
    }
    return out;
}

} // namespace

TEST_CASE("collect_avg_outputs: singleton mean, opposite captures cancel, permutation invariance") {
    ModelConfig cfg = patch_config();
    GrModel m = init_model(cfg);
    auto refs = random_labeled(cfg, 6, 3);
    const std::vector<Module> mods = {Module::ffn_out};
    const std::vector<int> positions = {0, 1};

    AvgBank one = collect_avg_outputs(m, {refs[0]}, mods, positions);
    // singleton: the average equals that query's capture
    grmodel::ForwardOptions opt;
    opt.taps.push_back({2, Module::ffn_out, 1});
    std::vector<int> prefix(refs[0].second.begin(), refs[0].second.end() - 1);
    auto dec = grmodel::forward(m, refs[0].first, prefix, opt);
    const auto& cap = dec.captures.at({2, Module::ffn_out, 1});
    const auto& avg = one.at({2, Module::ffn_out, 1});
    for (int j = 0; j < cfg.d_model; ++j) { REQUIRE(avg[j] == Catch::Approx(cap.at(0, j)).margin(1e-12)); }

    // permutation invariance
    auto shuffled = refs;
    std::swap(shuffled[0], shuffled[3]);
    std::swap(shuffled[1], shuffled[5]);
    AvgBank a = collect_avg_outputs(m, refs, mods, positions);
    AvgBank b = collect_avg_outputs(m, shuffled, mods, positions);
    for (const auto& [key, va] : a.mean) {
        const auto& vb = b.mean.at(key);
        for (size_t j = 0; j < va.size(); ++j) { REQUIRE(va[j] == Catch::Approx(vb[j]).margin(1e-12)); }
    }

    REQUIRE_THROWS_WITH(collect_avg_outputs(m, {}, mods, positions),
                        Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("patch_eval: no-op with per-input capture, probabilities in range, missing average") {
    ModelConfig cfg = patch_config();
    GrModel m = init_model(cfg);
    auto refs = random_labeled(cfg, 8, 7);
    auto evals = random_labeled(cfg, 8, 11);
    const std::vector<Module> mods = {Module::ffn_out, Module::self_attn_out, Module::cross_attn_out};
    AvgBank bank = collect_avg_outputs(m, refs, mods, {0, 1, 2});

    SECTION("baseline equals patching each input with its own capture") {
        // per-input self-override is the identity: mean gold prob must match
        const double base = patch_eval(m, evals, bank, -1, Module::ffn_out, 1);
        double self_patched = 0.0;
        const auto vocab = cfg.vocab();
        for (const auto& [q, tgt] : evals) {
            grmodel::ForwardOptions tap;
            tap.taps.push_back({3, Module::ffn_out, 1});
            std::vector<int> pre(tgt.begin(), tgt.begin() + 1);
            auto dec = grmodel::forward(m, q, pre, tap);
            grmodel::ForwardOptions ov;
            ov.overrides.push_back({{3, Module::ffn_out, 1}, dec.captures.at({3, Module::ffn_out, 1})});
            auto dec2 = grmodel::forward(m, q, pre, ov);
            const double* row = dec2.logits.ptr() + 1 * vocab.size();
            self_patched += grmodel::segment_probs(row, vocab, 1)[tgt[1]];
        }
        self_patched /= evals.size();
        REQUIRE(self_patched == Catch::Approx(base).margin(1e-12));
    }

    SECTION("all cells lie in [0,1]") {
        for (int layer = 0; layer < cfg.dec_layers; ++layer) {
            for (Module mod : mods) {
                const double p = patch_eval(m, evals, bank, layer, mod, 1);
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
            }
        }
    }

    SECTION("missing average is an error") {
        AvgBank empty;
        REQUIRE_THROWS_WITH(patch_eval(m, evals, empty, 0, Module::ffn_out, 0),
                            Catch::Matchers::ContainsSubstring("missing"));
    }
}

TEST_CASE("select_critical_window: synthetic drops, tie rule, depth guard, determinism") {
    PatchReport rep;
    rep.dec_layers = 8;
    rep.positions = {0, 1};
    rep.modules = {Module::ffn_out};
    for (int t : rep.positions) { rep.baseline[t] = 0.9; }
    SECTION("layers 3..7 carry all the drop") {
        for (int l = 0; l < 8; ++l) {
            const double p = (l >= 3 && l <= 7) ? 0.2 : 0.9;
            for (int t : rep.positions) { rep.p_correct[{l, Module::ffn_out, t}] = p; }
        }
        auto [lo, hi] = select_critical_window(rep, 5);
        REQUIRE(lo == 3);
        REQUIRE(hi == 7);
        auto again = select_critical_window(rep, 5);
        REQUIRE(again.first == 3);
        REQUIRE(again.second == 7);
    }
    SECTION("uniform drops select the deepest window") {
        for (int l = 0; l < 8; ++l) {
            for (int t : rep.positions) { rep.p_correct[{l, Module::ffn_out, t}] = 0.5; }
        }
        auto [lo, hi] = select_critical_window(rep, 5);
        REQUIRE(lo == 3);
        REQUIRE(hi == 7);
    }
    SECTION("depth below the window width is an error") {
        rep.dec_layers = 4;
        REQUIRE_THROWS_WITH(select_critical_window(rep, 5), Catch::Matchers::ContainsSubstring("window"));
    }
}

TEST_CASE("run_patching produces a full report with consistent drops") {
    ModelConfig cfg = patch_config();
    GrModel m = init_model(cfg);
    auto refs = random_labeled(cfg, 6, 17);
    auto evals = random_labeled(cfg, 6, 19);
    const std::vector<Module> mods = {Module::ffn_out, Module::self_attn_out};
    PatchReport rep = run_patching(m, refs, evals, mods, {0, 1, 2});
    REQUIRE(rep.dec_layers == cfg.dec_layers);
    for (int l = 0; l < cfg.dec_layers; ++l) {
        for (Module mod : mods) {
            for (int t : {0, 1, 2}) {
                const double p = rep.p_correct.at({l, mod, t});
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
                REQUIRE(rep.drop(l, mod, t) == Catch::Approx(rep.baseline.at(t) - p));
            }
        }
    }
    auto [lo, hi] = select_critical_window(rep, 5);
    REQUIRE(hi - lo == 4);
    REQUIRE(lo >= 0);
    REQUIRE(hi < cfg.dec_layers);
}
