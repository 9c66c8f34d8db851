// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gred/docid.hpp"
#include "gred/grmodel.hpp"
#include "gred/linalg.hpp"

namespace gred::editing {

using grmodel::GrModel;
using numerics::Tensor;
using json = nlohmann::json;

// <query, docID prefix, target docID token> at position t
struct EditRequest {
    std::vector<int> query;
    std::vector<int> prefix; // y_{<t}, docID vocabulary tokens
    int target = -1;         // y_t
    int position = 0;        // t
    long doc_key = -1;
};

// ---------------------------------------------------------------------------
// request construction
// ---------------------------------------------------------------------------

struct NewDocSupervision {
    long doc_key = -1;
    std::vector<int> docid_tokens; // full token sequence
    std::vector<std::vector<int>> pseudo_queries;
};

// One request per (document, pseudo-query, docID position).
inline std::vector<EditRequest> build_edit_requests(const std::vector<NewDocSupervision>& docs) {
    std::vector<EditRequest> out;
    for (const NewDocSupervision& d : docs) {
        if (d.docid_tokens.empty()) {
            fail(ErrorKind::config, "build_edit_requests: document " + std::to_string(d.doc_key) +
                                        " has no assigned docID");
        }
        if (d.pseudo_queries.empty()) {
            fail(ErrorKind::config, "build_edit_requests: document " + std::to_string(d.doc_key) +
                                        " has no pseudo-queries");
        }
        for (const auto& q : d.pseudo_queries) {
            for (size_t t = 0; t < d.docid_tokens.size(); ++t) {
                EditRequest r;
                r.query = q;
                r.prefix.assign(d.docid_tokens.begin(), d.docid_tokens.begin() + t);
                r.target = d.docid_tokens[t];
                r.position = static_cast<int>(t);
                r.doc_key = d.doc_key;
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// key extraction
// ---------------------------------------------------------------------------

// (request index order is preserved: column u corresponds to requests[u])
namespace detail {

struct Bucket {
    int position;
    int qlen;
    std::vector<int> idxs; // request indexes
};

inline std::vector<Bucket> bucket_requests(const std::vector<EditRequest>& requests) {
    std::map<std::pair<int, int>, std::vector<int>> grouped;
    for (size_t i = 0; i < requests.size(); ++i) {
        grouped[{requests[i].position, static_cast<int>(requests[i].query.size())}].push_back(
            static_cast<int>(i));
    }
    std::vector<Bucket> out;
    for (auto& [key, idxs] : grouped) { out.push_back({key.first, key.second, std::move(idxs)}); }
    return out;
}

} // namespace detail

// Captures FFN keys (and optionally layer-l FFN outputs) for every request
// under the model's current parameters. Returned matrices are column-stacked
// in request order: K[layer] is [d_ffn, u], ffn_out_l is [d_model, u].
struct RequestActivations {
    std::map<int, Tensor> keys;
    Tensor ffn_out_l;
};

inline RequestActivations collect_request_activations(const GrModel& m,
                                                      const std::vector<EditRequest>& requests,
                                                      const std::vector<int>& layers, int ffn_out_layer = -1,
                                                      int batch_size = 256) {
    using namespace numerics;
    NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    const int u = static_cast<int>(requests.size());
    RequestActivations out;
    for (int j : layers) { out.keys[j] = Tensor({m.cfg.d_ffn, u}); }
    if (ffn_out_layer >= 0) { out.ffn_out_l = Tensor({m.cfg.d_model, u}); }
    for (const auto& bucket : detail::bucket_requests(requests)) {
        const int t = bucket.position;
        for (size_t start = 0; start < bucket.idxs.size(); start += batch_size) {
            const size_t end = std::min(bucket.idxs.size(), start + batch_size);
            const int B = static_cast<int>(end - start);
            std::vector<const std::vector<int>*> sources(B);
            std::vector<std::vector<int>> dec_in(B);
            for (int b = 0; b < B; ++b) {
                const EditRequest& r = requests[bucket.idxs[start + b]];
                sources[b] = &r.query;
                dec_in[b].push_back(vocab.bos());
                dec_in[b].insert(dec_in[b].end(), r.prefix.begin(), r.prefix.end());
            }
            grmodel::ForwardOptions opt;
            for (int j : layers) { opt.taps.push_back({j, grmodel::Module::ffn_key, t}); }
            if (ffn_out_layer >= 0) {
                opt.taps.push_back({ffn_out_layer, grmodel::Module::ffn_out, t});
            }
            grmodel::EncodeResult enc = grmodel::encode_batch(m, sources);
            grmodel::DecodeResult dec = grmodel::decode_batch(m, enc, dec_in, opt);
            for (int j : layers) {
                const Tensor& cap = dec.captures.at({j, grmodel::Module::ffn_key, t});
                Tensor& dst = out.keys[j];
                for (int b = 0; b < B; ++b) {
                    const int col = bucket.idxs[start + b];
                    for (int i = 0; i < m.cfg.d_ffn; ++i) { dst.ptr()[static_cast<long>(i) * u + col] = cap.at(b, i); }
                }
            }
            if (ffn_out_layer >= 0) {
                const Tensor& cap = dec.captures.at({ffn_out_layer, grmodel::Module::ffn_out, t});
                for (int b = 0; b < B; ++b) {
                    const int col = bucket.idxs[start + b];
                    for (int i = 0; i < m.cfg.d_model; ++i) {
                        out.ffn_out_l.ptr()[static_cast<long>(i) * u + col] = cap.at(b, i);
                    }
                }
            }
        }
    }
    return out;
}

// K^{(j)} for a request set: keys sigma(W_in h) at the position predicting
// the target, column-stacked in request order.
inline Tensor extract_keys(const GrModel& m, const std::vector<EditRequest>& requests, int layer) {
    if (layer < 0 || layer >= m.cfg.dec_layers) {
        fail(ErrorKind::config, "extract_keys: layer out of range");
    }
    return collect_request_activations(m, requests, {layer}).keys.at(layer);
}

// Preserved-key contexts: (query, prefix, position) drawn from initial-corpus
// supervision; reused across stages so K0 freshness tracks parameter edits.
inline std::vector<EditRequest> sample_preserved_contexts(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& initial_pairs, int n0,
    uint64_t seed) {
    if (initial_pairs.empty() || n0 < 1) {
        fail(ErrorKind::config, "sample_preserved_contexts: need >= 1 pair and n0 >= 1");
    }
    std::vector<std::pair<int, int>> contexts; // (pair index, position)
    const int L = static_cast<int>(initial_pairs[0].second.size());
    for (size_t i = 0; i < initial_pairs.size(); ++i) {
        for (int t = 0; t < L; ++t) { contexts.emplace_back(static_cast<int>(i), t); }
    }
    std::mt19937_64 rng(sub_seed(seed, "k0"));
    std::shuffle(contexts.begin(), contexts.end(), rng);
    const int take = std::min<int>(n0, static_cast<int>(contexts.size()));
    std::vector<EditRequest> out;
    out.reserve(take);
    for (int i = 0; i < take; ++i) {
        const auto& [pi, t] = contexts[i];
        const auto& [q, tokens] = initial_pairs[pi];
        EditRequest r;
        r.query = q;
        r.prefix.assign(tokens.begin(), tokens.begin() + t);
        r.target = tokens[t];
        r.position = t;
        out.push_back(std::move(r));
    }
    return out;
}

inline Tensor collect_preserved_keys(
    const GrModel& m, const std::vector<std::pair<std::vector<int>, std::vector<int>>>& initial_pairs,
    int layer, int n0, uint64_t seed) {
    return extract_keys(m, sample_preserved_contexts(initial_pairs, n0, seed), layer);
}

// ---------------------------------------------------------------------------
// hybrid-label schedule
// ---------------------------------------------------------------------------

struct HybridSchedule {
    double lambda0 = 0.3;
    int steps = 50;
    enum class Mode { linear, constant } mode = Mode::linear;

    static HybridSchedule constant(double lambda, int steps) {
        HybridSchedule s;
        s.lambda0 = lambda;
        s.steps = steps;
        s.mode = Mode::constant;
        return s;
    }
};

// lambda_s = lambda0 + (1 - lambda0) * step / (S - 1) for the linear ramp
inline double lambda_schedule(int step, const HybridSchedule& sched) {
    if (step < 0 || step >= sched.steps) {
        fail(ErrorKind::config, "lambda_schedule: step " + std::to_string(step) + " outside [0," +
                                    std::to_string(sched.steps) + ")");
    }
    if (sched.mode == HybridSchedule::Mode::constant) { return sched.lambda0; }
    if (sched.steps == 1) { return 1.0; }
    return sched.lambda0 + (1.0 - sched.lambda0) * static_cast<double>(step) / (sched.steps - 1);
}

// (1 - lambda) * p_orig + lambda * one_hot(y_t)
inline std::vector<double> hybrid_target(const std::vector<double>& p_orig, int y_t, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) { fail(ErrorKind::config, "hybrid_target: lambda outside [0,1]"); }
    double sum = 0.0;
    for (double p : p_orig) { sum += p; }
    if (std::abs(sum - 1.0) > 1e-6) {
        fail(ErrorKind::numeric, "hybrid_target: p_orig not normalized (sum " + std::to_string(sum) + ")");
    }
    if (y_t < 0 || y_t >= static_cast<int>(p_orig.size())) {
        fail(ErrorKind::config, "hybrid_target: target token out of range");
    }
    std::vector<double> out(p_orig.size());
    for (size_t v = 0; v < p_orig.size(); ++v) {
        out[v] = (1.0 - lambda) * p_orig[v] + (v == static_cast<size_t>(y_t) ? lambda : 0.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// suffix cache: recompute only the decoding row through layers > l
// ---------------------------------------------------------------------------

// An FFN-output override at (layer l, row t) leaves rows < t of every deeper
// layer unchanged (causal masking), so their self-attention keys/values and
// the cross-attention projections can be frozen once per request batch.
struct SuffixCache {
    int layer_l = 0;
    int position = 0;
    int batch = 0;
    int src_len = 0;
    Tensor x_base;              // [B, d] residual row t at layer l before the FFN add
    Tensor m_orig;              // [B, d] original FFN outputs m_i
    Tensor p_orig;              // [B, V] frozen segment-masked output distribution
    std::map<int, Tensor> self_k; // layer -> [B*t, d]
    std::map<int, Tensor> self_v;
    std::map<int, Tensor> cross_k; // layer -> [B*src_len, d]
    std::map<int, Tensor> cross_v;
};

inline SuffixCache build_suffix_cache(const GrModel& m, const std::vector<EditRequest>& reqs,
                                      const std::vector<int>& idxs, int layer_l) {
    using namespace numerics;
    NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    const int B = static_cast<int>(idxs.size());
    const int t = reqs[idxs[0]].position;
    const int rows = t + 1;
    const int d = m.cfg.d_model;
    std::vector<const std::vector<int>*> sources(B);
    std::vector<std::vector<int>> dec_in(B);
    for (int b = 0; b < B; ++b) {
        const EditRequest& r = reqs[idxs[b]];
        sources[b] = &r.query;
        dec_in[b].push_back(vocab.bos());
        dec_in[b].insert(dec_in[b].end(), r.prefix.begin(), r.prefix.end());
    }
    grmodel::EncodeResult enc = grmodel::encode_batch(m, sources);

    SuffixCache cache;
    cache.layer_l = layer_l;
    cache.position = t;
    cache.batch = B;
    cache.src_len = enc.src_len;

    auto P = [&](const std::string& n) { return m.param(n).detach(); };
    auto gather = [&](const Tensor& x) { return gather_rows(x, B, rows, t); };
    auto rows_below_t = [&](const Tensor& x) -> Tensor {
        // per-sample rows [0, t) stacked as [B*t, d]
        if (t == 0) { return Tensor(); }
        Tensor out({B * t, x.cols()});
        for (int b = 0; b < B; ++b) {
            std::memcpy(out.ptr() + static_cast<long>(b) * t * x.cols(),
                        x.ptr() + static_cast<long>(b) * rows * x.cols(),
                        sizeof(double) * t * x.cols());
        }
        return out;
    };

    std::vector<int> flat;
    for (const auto& ti : dec_in) { flat.insert(flat.end(), ti.begin(), ti.end()); }
    Tensor x = embedding(P("docid_emb"), flat);
    Tensor pos({B * rows, d});
    for (int b = 0; b < B; ++b) {
        std::memcpy(pos.ptr() + static_cast<long>(b) * rows * d, m.param("pos_dec").ptr(),
                    sizeof(double) * rows * d);
    }
    x = add(x, pos);
    for (int i = 0; i < m.cfg.dec_layers; ++i) {
        const std::string pre = "dec." + std::to_string(i) + ".";
        Tensor h1 = layer_norm(x, P(pre + "ln1.g"), P(pre + "ln1.b"));
        Tensor k_self = matmul(h1, P(pre + "self.wk"));
        Tensor v_self = matmul(h1, P(pre + "self.wv"));
        if (i > layer_l && t > 0) {
            cache.self_k[i] = rows_below_t(k_self);
            cache.self_v[i] = rows_below_t(v_self);
        }
        Tensor sa = attention(matmul(h1, P(pre + "self.wq")), k_self, v_self, B, rows, rows,
                              m.cfg.n_heads, true);
        x = add(x, matmul(sa, P(pre + "self.wo")));
        Tensor h2 = layer_norm(x, P(pre + "ln2.g"), P(pre + "ln2.b"));
        Tensor ck = matmul(enc.memory, P(pre + "cross.wk"));
        Tensor cv = matmul(enc.memory, P(pre + "cross.wv"));
        if (i > layer_l) {
            cache.cross_k[i] = ck;
            cache.cross_v[i] = cv;
        }
        Tensor ca = attention(matmul(h2, P(pre + "cross.wq")), ck, cv, B, rows, enc.src_len,
                              m.cfg.n_heads, false);
        x = add(x, matmul(ca, P(pre + "cross.wo")));
        Tensor h3 = layer_norm(x, P(pre + "ln3.g"), P(pre + "ln3.b"));
        Tensor key = grmodel::detail::act(add(matmul(h3, P(pre + "ffn.w_in")), P(pre + "ffn.b_in")),
                                          m.cfg.activation);
        Tensor ffn = matmul(key, P(pre + "ffn.w_out"));
        if (i == layer_l) {
            cache.x_base = gather(x);
            cache.m_orig = gather(ffn);
        }
        x = add(x, ffn);
    }
    x = layer_norm(x, P("dec_final_ln.g"), P("dec_final_ln.b"));
    Tensor logits = add(matmul(x, P("out_proj")), P("out_bias"));
    cache.p_orig = Tensor({B, vocab.size()});
    for (int b = 0; b < B; ++b) {
        const double* row = logits.ptr() + (static_cast<long>(b) * rows + t) * vocab.size();
        auto probs = grmodel::segment_probs(row, vocab, t);
        std::memcpy(cache.p_orig.ptr() + static_cast<long>(b) * vocab.size(), probs.data(),
                    sizeof(double) * vocab.size());
    }
    return cache;
}

// Row-t logits when the layer-l FFN output is replaced by `values` [B, d].
// Gradients flow only through `values`; everything else is frozen.
inline Tensor suffix_logits(const GrModel& m, const SuffixCache& cache, const Tensor& values) {
    using namespace numerics;
    const int B = cache.batch;
    const int t = cache.position;
    auto P = [&](const std::string& n) { return m.param(n).detach(); };
    Tensor x = add(cache.x_base, values);
    for (int i = cache.layer_l + 1; i < m.cfg.dec_layers; ++i) {
        const std::string pre = "dec." + std::to_string(i) + ".";
        Tensor h1 = layer_norm(x, P(pre + "ln1.g"), P(pre + "ln1.b"));
        Tensor k_new = matmul(h1, P(pre + "self.wk"));
        Tensor v_new = matmul(h1, P(pre + "self.wv"));
        Tensor k_all = t > 0 ? interleave_rows(cache.self_k.at(i), k_new, B) : k_new;
        Tensor v_all = t > 0 ? interleave_rows(cache.self_v.at(i), v_new, B) : v_new;
        Tensor sa = attention(matmul(h1, P(pre + "self.wq")), k_all, v_all, B, 1, t + 1, m.cfg.n_heads,
                              false);
        x = add(x, matmul(sa, P(pre + "self.wo")));
        Tensor h2 = layer_norm(x, P(pre + "ln2.g"), P(pre + "ln2.b"));
        Tensor ca = attention(matmul(h2, P(pre + "cross.wq")), cache.cross_k.at(i), cache.cross_v.at(i), B,
                              1, cache.src_len, m.cfg.n_heads, false);
        x = add(x, matmul(ca, P(pre + "cross.wo")));
        Tensor h3 = layer_norm(x, P(pre + "ln3.g"), P(pre + "ln3.b"));
        Tensor key = grmodel::detail::act(add(matmul(h3, P(pre + "ffn.w_in")), P(pre + "ffn.b_in")),
                                          m.cfg.activation);
        x = add(x, matmul(key, P(pre + "ffn.w_out")));
    }
    x = layer_norm(x, P("dec_final_ln.g"), P("dec_final_ln.b"));
    return add(matmul(x, P("out_proj")), P("out_bias"));
}

// ---------------------------------------------------------------------------
// edit-vector optimization
// ---------------------------------------------------------------------------

struct DeltaConfig {
    double lr = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // cap on ||delta|| relative to max(mean ||m_i||, mean ||x_base||); the
    // residual-stream norm floors the scale when FFN outputs are near zero
    double norm_cap_mult = 5.0;
    double kl_tol = 2e-6; // rows below this KL(target||model) are already optimal
};

struct BatchDeltaResult {
    Tensor delta;  // [B, d]
    Tensor values; // [B, d] = m + delta
    std::vector<double> initial_gold_prob;
    std::vector<double> final_gold_prob;
    std::vector<double> loss_trace; // batch-mean cross-entropy per step
};

// Gradient descent on delta under the hybrid-label objective. p_orig is
// frozen from the unedited pass; the target is rebuilt each step from the
// current lambda. Rows whose KL(target || model) is below kl_tol are frozen.
inline BatchDeltaResult optimize_delta_rows(const GrModel& m, const SuffixCache& cache,
                                            const std::vector<int>& targets, const HybridSchedule& sched,
                                            const DeltaConfig& cfg) {
    using namespace numerics;
    const int B = cache.batch;
    const int d = m.cfg.d_model;
    const auto vocab = m.cfg.vocab();
    const int V = vocab.size();
    const int t = cache.position;

    BatchDeltaResult out;
    out.delta = Tensor({B, d}, 0.0);
    for (int b = 0; b < B; ++b) {
        out.initial_gold_prob.push_back(cache.p_orig.at(b, targets[b]));
    }
    // row-t segment mask, shared across the batch
    Tensor mask({B, V}, -1e30);
    for (int b = 0; b < B; ++b) {
        auto [sb, se] = vocab.segment(t);
        for (int v = sb; v < se; ++v) { mask.ptr()[static_cast<long>(b) * V + v] = 0.0; }
    }
    double mean_m = 0.0, mean_x = 0.0;
    for (int b = 0; b < B; ++b) {
        double m2 = 0.0, x2 = 0.0;
        for (int j = 0; j < d; ++j) {
            m2 += cache.m_orig.at(b, j) * cache.m_orig.at(b, j);
            x2 += cache.x_base.at(b, j) * cache.x_base.at(b, j);
        }
        mean_m += std::sqrt(m2);
        mean_x += std::sqrt(x2);
    }
    // Adam moves each coordinate by at most ~lr per step, so lr*S*sqrt(d)
    // bounds any reachable delta; the cap only trips on true runaway.
    const double reachable = cfg.lr * sched.steps * std::sqrt(static_cast<double>(d));
    const double cap = cfg.norm_cap_mult * std::max(mean_m, mean_x) / B + 1.5 * reachable;

    // per-row Adam state with a freeze mask
    std::vector<double> mom(static_cast<size_t>(B) * d, 0.0), vel(static_cast<size_t>(B) * d, 0.0);
    std::vector<int> row_steps(B, 0);

    for (int step = 0; step < sched.steps; ++step) {
        const double lambda = lambda_schedule(step, sched);
        Tensor target({B, V});
        for (int b = 0; b < B; ++b) {
            const double* po = cache.p_orig.ptr() + static_cast<long>(b) * V;
            double* tr = target.ptr() + static_cast<long>(b) * V;
            for (int v = 0; v < V; ++v) {
                tr[v] = (1.0 - lambda) * po[v] + (v == targets[b] ? lambda : 0.0);
            }
        }
        Tensor delta = Tensor::from({B, d}, out.delta.vec(), true);
        Tensor values = add(cache.m_orig.detach(), delta);
        Tensor logits = suffix_logits(m, cache, values);
        Tensor masked = add(logits, mask);
        Tensor losses = cross_entropy_rows(masked, target);

        // freeze rows already at their optimum for the current target
        std::vector<double> active(B, 0.0);
        int n_active = 0;
        for (int b = 0; b < B; ++b) {
            const double* lrow = masked.ptr() + static_cast<long>(b) * V;
            auto probs = grmodel::segment_probs(lrow, vocab, t);
            double kl = 0.0;
            const double* tr = target.ptr() + static_cast<long>(b) * V;
            for (int v = 0; v < V; ++v) {
                if (tr[v] > 0.0 && probs[v] > 0.0) { kl += tr[v] * std::log(tr[v] / probs[v]); }
            }
            if (kl >= cfg.kl_tol) {
                active[b] = 1.0;
                ++n_active;
            }
        }
        double mean_loss = 0.0;
        for (int b = 0; b < B; ++b) { mean_loss += losses.at(b); }
        mean_loss /= B;
        out.loss_trace.push_back(mean_loss);
        if (!std::isfinite(mean_loss)) {
            fail(ErrorKind::numeric, "optimize_delta: non-finite loss at step " + std::to_string(step));
        }
        if (n_active == 0) { break; }

        Tensor loss = numerics::sum(mul(losses, Tensor::from({B}, active)));
        backward(loss);
        const std::vector<double>& g = delta.grad();
        double* dp = out.delta.ptr();
        for (int b = 0; b < B; ++b) {
            if (active[b] == 0.0) { continue; }
            row_steps[b] += 1;
            const double bc1 = 1.0 - std::pow(cfg.beta1, row_steps[b]);
            const double bc2 = 1.0 - std::pow(cfg.beta2, row_steps[b]);
            double norm2 = 0.0;
            for (int j = 0; j < d; ++j) {
                const long i = static_cast<long>(b) * d + j;
                const double gi = g[i];
                if (!std::isfinite(gi)) {
                    fail(ErrorKind::numeric, "optimize_delta: non-finite gradient (divergence)");
                }
                mom[i] = cfg.beta1 * mom[i] + (1.0 - cfg.beta1) * gi;
                vel[i] = cfg.beta2 * vel[i] + (1.0 - cfg.beta2) * gi * gi;
                dp[i] -= cfg.lr * (mom[i] / bc1) / (std::sqrt(vel[i] / bc2) + cfg.adam_eps);
                norm2 += dp[i] * dp[i];
            }
            if (std::sqrt(norm2) > cap) {
                fail(ErrorKind::numeric,
                     "optimize_delta: ||delta|| exceeded cap " + std::to_string(cap) + " (divergence)");
            }
        }
    }
    out.values = numerics::add(cache.m_orig.detach(), out.delta.detach());
    {
        numerics::NoGradGuard ng;
        Tensor logits = suffix_logits(m, cache, out.values);
        for (int b = 0; b < B; ++b) {
            const double* row = logits.ptr() + static_cast<long>(b) * V;
            out.final_gold_prob.push_back(grmodel::segment_probs(row, vocab, t)[targets[b]]);
        }
    }
    return out;
}

struct DeltaResult {
    std::vector<double> delta;
    std::vector<double> value; // m_i + delta_i
    std::vector<double> loss_trace;
    double initial_gold_prob = 0.0;
    double final_gold_prob = 0.0;
};

// Single-request edit vector at layer l (Eq.-by-Eq. path used by tests; the
// batch path in apply_dome computes identical per-request results).
inline DeltaResult optimize_delta(const GrModel& m, const EditRequest& request, int layer_l,
                                  const HybridSchedule& sched, const DeltaConfig& cfg = {}) {
    std::vector<EditRequest> reqs = {request};
    SuffixCache cache = build_suffix_cache(m, reqs, {0}, layer_l);
    BatchDeltaResult batch = optimize_delta_rows(m, cache, {request.target}, sched, cfg);
    DeltaResult out;
    out.delta = batch.delta.vec();
    out.value = batch.values.vec();
    out.loss_trace = batch.loss_trace;
    out.initial_gold_prob = batch.initial_gold_prob[0];
    out.final_gold_prob = batch.final_gold_prob[0];
    return out;
}

// ---------------------------------------------------------------------------
// closed-form constrained update
// ---------------------------------------------------------------------------

// Delta = (V1 - W K1) K1^T (K1 K1^T + K0 K0^T + eps I)^{-1}, the stationary
// point of || (W + D) K1 - V1 ||_F^2 + || D K0 ||_F^2. Pass eps < 0 for the
// trace-scaled default. K0 may be empty ([d0, 0]).
inline Tensor compute_update(const Tensor& w_out, const Tensor& k1, const Tensor& v1, const Tensor& k0,
                             double eps) {
    using namespace numerics;
    NoGradGuard ng;
    const int d1 = w_out.rows();
    const int d0 = w_out.cols();
    if (k1.rows() != d0 || k1.cols() < 1) { numerics::detail::shape_error("compute_update", k1, w_out); }
    if (v1.rows() != d1 || v1.cols() != k1.cols()) { numerics::detail::shape_error("compute_update", v1, k1); }
    Tensor gram = gram_cols(k1);
    if (k0.defined() && k0.numel() > 0) {
        if (k0.rows() != d0) { numerics::detail::shape_error("compute_update", k0, k1); }
        Tensor g0 = gram_cols(k0);
        for (long i = 0; i < gram.numel(); ++i) { gram.ptr()[i] += g0.at(i); }
    }
    if (eps < 0.0) { eps = default_ridge_eps(gram); }
    // residual R = V1 - W K1
    Tensor r = mat_product(w_out, k1);
    for (long i = 0; i < r.numel(); ++i) { r.ptr()[i] = v1.at(i) - r.at(i); }
    Tensor rk = mat_product(r, transpose(k1)); // [d1, d0]
    return ridge_solve(rk, gram, eps);
}

// value of the constrained objective at a given update (test/diagnostic aid)
inline double update_objective(const Tensor& w_out, const Tensor& delta, const Tensor& k1,
                               const Tensor& v1, const Tensor& k0) {
    using namespace numerics;
    NoGradGuard ng;
    Tensor w = Tensor::from(w_out.shape(), w_out.vec());
    for (long i = 0; i < w.numel(); ++i) { w.ptr()[i] += delta.at(i); }
    Tensor fit = mat_product(w, k1);
    double obj = 0.0;
    for (long i = 0; i < fit.numel(); ++i) {
        const double diff = fit.at(i) - v1.at(i);
        obj += diff * diff;
    }
    if (k0.defined() && k0.numel() > 0) {
        Tensor drift = mat_product(delta, k0);
        for (long i = 0; i < drift.numel(); ++i) { obj += drift.at(i) * drift.at(i); }
    }
    return obj;
}

// ---------------------------------------------------------------------------
// full DOME application
// ---------------------------------------------------------------------------

struct DomeConfig {
    HybridSchedule schedule;
    DeltaConfig delta;
    int n0 = 1000;
    double eps = -1.0; // < 0: trace-scaled default per stage
    uint64_t seed = 0;
    bool sequential_per_doc = false;
};

struct StageDiag {
    int layer = 0;
    double dist_factor = 0.0;
    double residual_norm = 0.0;
    double delta_norm = 0.0;
    double drift_k0 = 0.0; // || Delta K0 ||_F
    double fit_k1 = 0.0;   // || Delta K1 ||_F
};

struct EditPlan {
    int window_lo = 0;
    int window_hi = 0;
    std::vector<StageDiag> stages; // ascending layer order
    Tensor delta_matrix;           // [d_model, u] optimized edit vectors
    std::vector<int> delta_targets;
    std::vector<long> delta_doc_keys;
    std::vector<int> delta_positions;
    std::vector<double> final_gold_prob; // after all updates
    std::vector<double> initial_gold_prob;
    double residual_norm_before = 0.0;
    double residual_norm_after = 0.0;
    double wall_seconds = 0.0;

    json to_json() const {
        json stages_j = json::array();
        for (const StageDiag& s : stages) {
            stages_j.push_back(json{{"layer", s.layer},
                                    {"dist_factor", s.dist_factor},
                                    {"residual_norm", s.residual_norm},
                                    {"delta_norm", s.delta_norm},
                                    {"drift_k0", s.drift_k0},
                                    {"fit_k1", s.fit_k1}});
        }
        return json{{"window", {window_lo, window_hi}},
                    {"stages", stages_j},
                    {"residual_norm_before", residual_norm_before},
                    {"residual_norm_after", residual_norm_after},
                    {"n_requests", delta_targets.size()},
                    {"wall_seconds", wall_seconds}};
    }
};

namespace detail {

// One full DOME pass over a request subset; returns the optimized values and
// deltas in subset order and applies the staged updates to the model.
struct DomePassResult {
    Tensor v1;         // [d_model, u_sub]
    Tensor delta_cols; // [d_model, u_sub]
    std::vector<double> initial_gold_prob;
    std::vector<StageDiag> stages;
    double residual_before = 0.0;
    double residual_after = 0.0;
};

inline DomePassResult apply_dome_once(GrModel& m, const std::vector<EditRequest>& requests,
                                      const std::vector<EditRequest>& preserved_contexts, int lo, int hi,
                                      const DomeConfig& cfg) {
    using namespace numerics;
    const int u = static_cast<int>(requests.size());
    const int d = m.cfg.d_model;
    DomePassResult out;
    out.v1 = Tensor({d, u});
    out.delta_cols = Tensor({d, u});
    out.initial_gold_prob.assign(u, 0.0);

    // stage 1: optimize edit vectors at the final critical layer
    for (const auto& bucket : bucket_requests(requests)) {
        for (size_t start = 0; start < bucket.idxs.size(); start += 256) {
            const size_t end = std::min(bucket.idxs.size(), start + 256);
            std::vector<int> idxs(bucket.idxs.begin() + start, bucket.idxs.begin() + end);
            SuffixCache cache = build_suffix_cache(m, requests, idxs, hi);
            std::vector<int> targets;
            for (int i : idxs) { targets.push_back(requests[i].target); }
            BatchDeltaResult res = optimize_delta_rows(m, cache, targets, cfg.schedule, cfg.delta);
            for (size_t b = 0; b < idxs.size(); ++b) {
                const int col = idxs[b];
                for (int j = 0; j < d; ++j) {
                    out.v1.ptr()[static_cast<long>(j) * u + col] = res.values.at(static_cast<int>(b), j);
                    out.delta_cols.ptr()[static_cast<long>(j) * u + col] =
                        res.delta.at(static_cast<int>(b), j);
                }
                out.initial_gold_prob[col] = res.initial_gold_prob[b];
            }
        }
    }

    // stages 2..: sequential per-layer updates with key refresh
    for (int j = lo; j <= hi; ++j) {
        RequestActivations acts = collect_request_activations(m, requests, {j, hi}, hi);
        const Tensor& k1j = acts.keys.at(j);
        Tensor residual({d, u});
        for (long i = 0; i < residual.numel(); ++i) {
            residual.ptr()[i] = out.v1.at(i) - acts.ffn_out_l.at(i);
        }
        const double res_norm = frobenius_norm(residual);
        if (j == lo) { out.residual_before = res_norm; }

        Tensor k0j = extract_keys(m, preserved_contexts, j);
        const double dist = std::abs(static_cast<double>(hi - j + 1));
        Tensor scaled_residual = numerics::scale(residual, 1.0 / dist);

        Tensor gram = gram_cols(k1j);
        {
            Tensor g0 = gram_cols(k0j);
            for (long i = 0; i < gram.numel(); ++i) { gram.ptr()[i] += g0.at(i); }
        }
        const double eps = cfg.eps < 0.0 ? default_ridge_eps(gram) : cfg.eps;
        Tensor rk = mat_product(scaled_residual, transpose(k1j));
        Tensor delta_paper = ridge_solve(rk, gram, eps); // [d_model, d_ffn]

        // apply in place: stored w_out is the transpose of the paper layout
        Tensor& w = grmodel::ffn_w_out(m, j);
        for (int a = 0; a < m.cfg.d_ffn; ++a) {
            for (int b = 0; b < d; ++b) { w.ptr()[static_cast<long>(a) * d + b] += delta_paper.at(b, a); }
        }

        StageDiag diag;
        diag.layer = j;
        diag.dist_factor = 1.0 / dist;
        diag.residual_norm = res_norm;
        diag.delta_norm = frobenius_norm(delta_paper);
        diag.drift_k0 = frobenius_norm(mat_product(delta_paper, k0j));
        diag.fit_k1 = frobenius_norm(mat_product(delta_paper, k1j));
        out.stages.push_back(diag);
    }
    // closing residual under the fully edited parameters
    RequestActivations after = collect_request_activations(m, requests, {hi}, hi);
    Tensor residual({d, u});
    for (long i = 0; i < residual.numel(); ++i) { residual.ptr()[i] = out.v1.at(i) - after.ffn_out_l.at(i); }
    out.residual_after = frobenius_norm(residual);
    return out;
}

} // namespace detail

// DOME: optimize edit vectors at the last window layer, then distribute
// 1/dist-scaled closed-form updates across the window in ascending order,
// refreshing key activations after each stage.
inline EditPlan apply_dome(GrModel& m, const std::vector<EditRequest>& requests,
                           const std::vector<std::pair<std::vector<int>, std::vector<int>>>& initial_pairs,
                           int window_lo, int window_hi, const DomeConfig& cfg) {
    if (requests.empty()) { fail(ErrorKind::config, "apply_dome: no edit requests"); }
    if (window_lo < 0 || window_hi >= m.cfg.dec_layers || window_lo > window_hi) {
        fail(ErrorKind::config, "apply_dome: invalid window");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const int u = static_cast<int>(requests.size());
    const int d = m.cfg.d_model;
    EditPlan plan;
    plan.window_lo = window_lo;
    plan.window_hi = window_hi;
    plan.initial_gold_prob.assign(u, 0.0);
    plan.delta_matrix = Tensor({d, u});
    for (const EditRequest& r : requests) {
        plan.delta_targets.push_back(r.target);
        plan.delta_doc_keys.push_back(r.doc_key);
        plan.delta_positions.push_back(r.position);
    }
    std::vector<EditRequest> preserved = sample_preserved_contexts(initial_pairs, cfg.n0, cfg.seed);

    // request groups: everything at once, or per document in ascending key order
    std::vector<std::vector<int>> groups;
    if (!cfg.sequential_per_doc) {
        groups.emplace_back(u);
        std::iota(groups.back().begin(), groups.back().end(), 0);
    } else {
        std::map<long, std::vector<int>> per_doc;
        for (int i = 0; i < u; ++i) { per_doc[requests[i].doc_key].push_back(i); }
        for (auto& [key, idxs] : per_doc) { groups.push_back(std::move(idxs)); }
    }
    for (const auto& group : groups) {
        std::vector<EditRequest> sub;
        sub.reserve(group.size());
        for (int i : group) { sub.push_back(requests[i]); }
        detail::DomePassResult res =
            detail::apply_dome_once(m, sub, preserved, window_lo, window_hi, cfg);
        for (size_t c = 0; c < group.size(); ++c) {
            const int col = group[c];
            for (int j = 0; j < d; ++j) {
                plan.delta_matrix.ptr()[static_cast<long>(j) * u + col] =
                    res.delta_cols.at(j, static_cast<int>(c));
            }
            plan.initial_gold_prob[col] = res.initial_gold_prob[c];
        }
        plan.stages.insert(plan.stages.end(), res.stages.begin(), res.stages.end());
        plan.residual_norm_before = res.residual_before;
        plan.residual_norm_after = res.residual_after;
    }

    // effective gold probabilities after the full edit
    {
        numerics::NoGradGuard ng;
        plan.final_gold_prob.assign(u, 0.0);
        const auto vocab = m.cfg.vocab();
        for (const auto& bucket : detail::bucket_requests(requests)) {
            const int t = bucket.position;
            for (size_t start = 0; start < bucket.idxs.size(); start += 256) {
                const size_t end = std::min(bucket.idxs.size(), start + 256);
                const int B = static_cast<int>(end - start);
                std::vector<const std::vector<int>*> sources(B);
                std::vector<std::vector<int>> dec_in(B);
                for (int b = 0; b < B; ++b) {
                    const EditRequest& r = requests[bucket.idxs[start + b]];
                    sources[b] = &r.query;
                    dec_in[b].push_back(vocab.bos());
                    dec_in[b].insert(dec_in[b].end(), r.prefix.begin(), r.prefix.end());
                }
                grmodel::EncodeResult enc = grmodel::encode_batch(m, sources);
                grmodel::DecodeResult dec = grmodel::decode_batch(m, enc, dec_in);
                for (int b = 0; b < B; ++b) {
                    const int col = bucket.idxs[start + b];
                    const double* row =
                        dec.logits.ptr() + (static_cast<long>(b) * (t + 1) + t) * vocab.size();
                    plan.final_gold_prob[col] =
                        grmodel::segment_probs(row, vocab, t)[requests[col].target];
                }
            }
        }
    }
    plan.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return plan;
}

// delta dump: one row per request with its target metadata and components
inline void save_delta_csv(const EditPlan& plan, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_delta_csv: cannot open " + path); }
    const int d = plan.delta_matrix.rows();
    const int u = plan.delta_matrix.cols();
    out << "request,doc_key,position,target";
    for (int j = 0; j < d; ++j) { out << ",d" << j; }
    out << "\n";
    char buf[64];
    for (int c = 0; c < u; ++c) {
        out << c << "," << plan.delta_doc_keys[c] << "," << plan.delta_positions[c] << ","
            << plan.delta_targets[c];
        for (int j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", plan.delta_matrix.at(j, c));
            out << buf;
        }
        out << "\n";
    }
}

} // namespace gred::editing
