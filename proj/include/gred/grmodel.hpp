// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gred/docid.hpp"
#include "gred/linalg.hpp"
#include "gred/optim.hpp"
#include "gred/tensor.hpp"

namespace gred::grmodel {

using numerics::Tensor;
using json = nlohmann::json;

struct ModelConfig {
    int d_model = 128;
    int n_heads = 4;
    int d_ffn = 256; // FFN inner width d0: the editing target dimension
    int enc_layers = 2;
    int dec_layers = 8;
    int term_vocab = 0;
    int docid_K = 0;
    int docid_T = 0;
    int disamb_size = 1;
    int max_src_len = 64;
    std::string activation = "relu"; // sigma in the FFN key map
    uint64_t seed = 0;

    docid::DocIdVocab vocab() const { return docid::DocIdVocab{docid_K, docid_T, disamb_size}; }
    int docid_vocab_size() const { return vocab().size(); }
    int tgt_len() const { return vocab().seq_len(); }

    void validate() const {
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
            fail(ErrorKind::config, "model config: d_model must be a positive multiple of n_heads");
        }
        if (enc_layers < 1 || dec_layers < 1 || d_ffn < 1) {
            fail(ErrorKind::config, "model config: layer counts and d_ffn must be positive");
        }
        if (term_vocab < 1 || docid_K < 1 || docid_T < 1 || disamb_size < 1) {
            fail(ErrorKind::config, "model config: vocab sizes must be positive");
        }
    }

    json to_json() const {
        return json{{"d_model", d_model},       {"n_heads", n_heads},
                    {"d_ffn", d_ffn},           {"enc_layers", enc_layers},
                    {"dec_layers", dec_layers}, {"term_vocab", term_vocab},
                    {"docid_K", docid_K},       {"docid_T", docid_T},
                    {"disamb_size", disamb_size}, {"max_src_len", max_src_len},
                    {"activation", activation}, {"seed", seed}};
    }

    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ffn = j.at("d_ffn").get<int>();
        c.enc_layers = j.at("enc_layers").get<int>();
        c.dec_layers = j.at("dec_layers").get<int>();
        c.term_vocab = j.at("term_vocab").get<int>();
        c.docid_K = j.at("docid_K").get<int>();
        c.docid_T = j.at("docid_T").get<int>();
        c.disamb_size = j.at("disamb_size").get<int>();
        c.max_src_len = j.at("max_src_len").get<int>();
        c.activation = j.at("activation").get<std::string>();
        c.seed = j.at("seed").get<uint64_t>();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

// Parameter store with named access: (layer index, module name, matrix name)
// flattens to "dec.3.ffn.w_out" style keys.
class GrModel {
  public:
    ModelConfig cfg;

    Tensor& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) { fail(ErrorKind::config, "unknown parameter: " + name); }
        return params_[it->second].second;
    }
    const Tensor& param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) { fail(ErrorKind::config, "unknown parameter: " + name); }
        return params_[it->second].second;
    }
    bool has_param(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Tensor> all_params() {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (auto& [name, t] : params_) { out.push_back(t); }
        return out;
    }
    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

    void add_param(const std::string& name, Tensor t) {
        index_[name] = params_.size();
        params_.emplace_back(name, std::move(t));
    }

    // deep copy: editing operates on a copy so checkpoints stay pristine
    GrModel clone() const {
        GrModel out;
        out.cfg = cfg;
        for (const auto& [name, t] : params_) {
            out.add_param(name, Tensor::from(t.shape(), t.vec(), true));
        }
        return out;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) { t.zero_grad(); }
    }

  private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::unordered_map<std::string, size_t> index_;
};

inline GrModel init_model(const ModelConfig& cfg) {
    cfg.validate();
    GrModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(cfg.seed);
    const double gain = 0.02;
    const int d = cfg.d_model;
    auto w = [&](const std::string& name, numerics::Shape shape) {
        m.add_param(name, Tensor::randn(shape, rng, gain, true));
    };
    auto ln = [&](const std::string& name) {
        m.add_param(name + ".g", Tensor({d}, 1.0, true));
        m.add_param(name + ".b", Tensor({d}, 0.0, true));
    };
    w("term_emb", {cfg.term_vocab, d});
    w("pos_enc", {cfg.max_src_len, d});
    w("docid_emb", {cfg.docid_vocab_size(), d});
    w("pos_dec", {cfg.tgt_len(), d});
    for (int i = 0; i < cfg.enc_layers; ++i) {
        const std::string p = "enc." + std::to_string(i) + ".";
        ln(p + "ln1");
        w(p + "self.wq", {d, d});
        w(p + "self.wk", {d, d});
        w(p + "self.wv", {d, d});
        w(p + "self.wo", {d, d});
        ln(p + "ln2");
        w(p + "ffn.w_in", {d, cfg.d_ffn});
        m.add_param(p + "ffn.b_in", Tensor({cfg.d_ffn}, 0.0, true));
        w(p + "ffn.w_out", {cfg.d_ffn, d});
    }
    ln("enc_final_ln");
    for (int i = 0; i < cfg.dec_layers; ++i) {
        const std::string p = "dec." + std::to_string(i) + ".";
        ln(p + "ln1");
        w(p + "self.wq", {d, d});
        w(p + "self.wk", {d, d});
        w(p + "self.wv", {d, d});
        w(p + "self.wo", {d, d});
        ln(p + "ln2");
        w(p + "cross.wq", {d, d});
        w(p + "cross.wk", {d, d});
        w(p + "cross.wv", {d, d});
        w(p + "cross.wo", {d, d});
        ln(p + "ln3");
        w(p + "ffn.w_in", {d, cfg.d_ffn});
        m.add_param(p + "ffn.b_in", Tensor({cfg.d_ffn}, 0.0, true));
        // no output-projection bias: the FFN output is exactly w_out^T k
        w(p + "ffn.w_out", {cfg.d_ffn, d});
    }
    ln("dec_final_ln");
    w("out_proj", {d, cfg.docid_vocab_size()});
    m.add_param("out_bias", Tensor({cfg.docid_vocab_size()}, 0.0, true));
    return m;
}

// decoder FFN output projection, stored row-key convention [d_ffn, d_model]
inline Tensor& ffn_w_out(GrModel& m, int layer) {
    return m.param("dec." + std::to_string(layer) + ".ffn.w_out");
}

// ---------------------------------------------------------------------------
// taps
// ---------------------------------------------------------------------------

enum class Module { ffn_in, ffn_key, ffn_out, self_attn_out, cross_attn_out, hidden };

inline std::string module_name(Module m) {
    switch (m) {
        case Module::ffn_in: return "ffn_in";
        case Module::ffn_key: return "ffn_key";
        case Module::ffn_out: return "ffn_out";
        case Module::self_attn_out: return "self_attn_out";
        case Module::cross_attn_out: return "cross_attn_out";
        case Module::hidden: return "hidden";
    }
    return "?";
}

struct TapKey {
    int layer = 0;
    Module module = Module::ffn_out;
    int position = 0;
    auto operator<=>(const TapKey&) const = default;
};

// capture values are [batch, dim] matrices, one row per sample
struct TapCapture {
    std::map<TapKey, Tensor> values;

    const Tensor& at(const TapKey& k) const {
        auto it = values.find(k);
        if (it == values.end()) {
            fail(ErrorKind::config, "tap capture missing (" + std::to_string(k.layer) + "," +
                                        module_name(k.module) + "," + std::to_string(k.position) + ")");
        }
        return it->second;
    }
};

// value: [dim] shared across the batch or [batch, dim]; may carry gradients
struct OverrideSpec {
    TapKey at;
    Tensor value;
};

struct ForwardOptions {
    std::vector<TapKey> taps;
    std::vector<OverrideSpec> overrides;
    bool grad_params = false; // when false, parameters are frozen (detached)
};

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

struct EncodeResult {
    Tensor memory; // [batch*src_len, d]
    int batch = 0;
    int src_len = 0;
};

namespace detail {

inline Tensor act(const Tensor& x, const std::string& kind) {
    if (kind == "gelu") { return numerics::gelu(x); }
    return numerics::relu(x);
}

inline Tensor p(const GrModel& m, const std::string& name, bool grad_params) {
    const Tensor& t = m.param(name);
    return grad_params ? t : t.detach();
}

} // namespace detail

// Sources must share one length (batches are bucketed by exact length).
inline EncodeResult encode_batch(const GrModel& m, const std::vector<const std::vector<int>*>& sources,
                                 bool grad_params = false) {
    using namespace numerics;
    if (sources.empty()) { fail(ErrorKind::config, "encode_batch: empty batch"); }
    const int B = static_cast<int>(sources.size());
    const int L = static_cast<int>(sources[0]->size());
    if (L < 1) { fail(ErrorKind::config, "encode_batch: empty source sequence"); }
    if (L > m.cfg.max_src_len) {
        fail(ErrorKind::config, "encode_batch: source length " + std::to_string(L) + " exceeds max_src_len " +
                                    std::to_string(m.cfg.max_src_len));
    }
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(B) * L);
    for (const auto* s : sources) {
        if (static_cast<int>(s->size()) != L) {
            fail(ErrorKind::config, "encode_batch: ragged batch (expected length " + std::to_string(L) + ")");
        }
        flat.insert(flat.end(), s->begin(), s->end());
    }
    auto P = [&](const std::string& n) { return detail::p(m, n, grad_params); };
    Tensor x = embedding(P("term_emb"), flat);
    // learned absolute positions, tiled per sample
    Tensor pos({B * L, m.cfg.d_model});
    {
        const Tensor& pe = m.param("pos_enc");
        for (int b = 0; b < B; ++b) {
            std::memcpy(pos.ptr() + static_cast<long>(b) * L * m.cfg.d_model, pe.ptr(),
                        sizeof(double) * L * m.cfg.d_model);
        }
        if (grad_params && numerics::grad_enabled()) {
            // route gradients back into pos_enc rows
            Tensor pe_param = P("pos_enc");
            pos.set_requires_grad(true);
            pos.node = std::make_shared<Node>();
            pos.node->op = "tile_pos";
            pos.node->parents = {pe_param};
            const int d = m.cfg.d_model;
            pos.node->backward = [B, L, d](const Tensor& o) {
                Tensor pe = o.node->parents[0];
                pe.ensure_grad();
                const double* g = o.grad().data();
                double* gp = pe.grad().data();
                for (int b = 0; b < B; ++b) {
                    for (long i = 0; i < static_cast<long>(L) * d; ++i) {
                        gp[i] += g[static_cast<long>(b) * L * d + i];
                    }
                }
            };
        }
    }
    x = add(x, pos);
    for (int i = 0; i < m.cfg.enc_layers; ++i) {
        const std::string pre = "enc." + std::to_string(i) + ".";
        Tensor h = layer_norm(x, P(pre + "ln1.g"), P(pre + "ln1.b"));
        Tensor sa = attention(matmul(h, P(pre + "self.wq")), matmul(h, P(pre + "self.wk")),
                              matmul(h, P(pre + "self.wv")), B, L, L, m.cfg.n_heads, false);
        x = add(x, matmul(sa, P(pre + "self.wo")));
        Tensor h2 = layer_norm(x, P(pre + "ln2.g"), P(pre + "ln2.b"));
        Tensor key = detail::act(add(matmul(h2, P(pre + "ffn.w_in")), P(pre + "ffn.b_in")), m.cfg.activation);
        x = add(x, matmul(key, P(pre + "ffn.w_out")));
    }
    x = layer_norm(x, P("enc_final_ln.g"), P("enc_final_ln.b"));
    return {x, B, L};
}

struct DecodeResult {
    Tensor logits; // [batch*rows, docid_vocab]
    TapCapture captures;
    int batch = 0;
    int rows = 0;
};

// Teacher-forced decoder pass over `rows` target positions per sample.
// target_inputs[b] = [bos, y_0, ..., y_{rows-2}]; row r predicts y_r and only
// conditions on rows <= r (causal self-attention).
inline DecodeResult decode_batch(const GrModel& m, const EncodeResult& enc,
                                 const std::vector<std::vector<int>>& target_inputs,
                                 const ForwardOptions& opt = {}) {
    using namespace numerics;
    const int B = enc.batch;
    if (static_cast<int>(target_inputs.size()) != B) {
        fail(ErrorKind::config, "decode_batch: batch size mismatch with encoder output");
    }
    const int rows = static_cast<int>(target_inputs[0].size());
    for (const auto& t : target_inputs) {
        if (static_cast<int>(t.size()) != rows) { fail(ErrorKind::config, "decode_batch: ragged targets"); }
    }
    for (const TapKey& k : opt.taps) {
        if (k.layer < 0 || k.layer >= m.cfg.dec_layers) {
            fail(ErrorKind::config, "tap addresses nonexistent decoder layer " + std::to_string(k.layer));
        }
        if (k.position < 0 || k.position >= rows) {
            fail(ErrorKind::config, "tap position " + std::to_string(k.position) + " out of range");
        }
    }
    for (const OverrideSpec& o : opt.overrides) {
        if (o.at.layer < 0 || o.at.layer >= m.cfg.dec_layers) {
            fail(ErrorKind::config, "override addresses nonexistent decoder layer " + std::to_string(o.at.layer));
        }
    }
    auto P = [&](const std::string& n) { return detail::p(m, n, opt.grad_params); };
    const int d = m.cfg.d_model;

    DecodeResult out;
    out.batch = B;
    out.rows = rows;

    auto tap_point = [&](Tensor& value, int layer, Module module) {
        // apply overrides first so captures observe the effective value
        for (const OverrideSpec& o : opt.overrides) {
            if (o.at.layer == layer && o.at.module == module) {
                value = override_rows(value, o.value, B, rows, o.at.position);
            }
        }
        for (const TapKey& k : opt.taps) {
            if (k.layer == layer && k.module == module) {
                out.captures.values[k] = gather_rows(value, B, rows, k.position);
            }
        }
    };

    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(B) * rows);
    for (const auto& t : target_inputs) { flat.insert(flat.end(), t.begin(), t.end()); }
    Tensor x = embedding(P("docid_emb"), flat);
    Tensor pos({B * rows, d});
    {
        const Tensor& pe = m.param("pos_dec");
        for (int b = 0; b < B; ++b) {
            std::memcpy(pos.ptr() + static_cast<long>(b) * rows * d, pe.ptr(), sizeof(double) * rows * d);
        }
        if (opt.grad_params && numerics::grad_enabled()) {
            Tensor pe_param = P("pos_dec");
            pos.set_requires_grad(true);
            pos.node = std::make_shared<Node>();
            pos.node->op = "tile_pos";
            pos.node->parents = {pe_param};
            pos.node->backward = [B, rows, d](const Tensor& o) {
                Tensor pe = o.node->parents[0];
                pe.ensure_grad();
                const double* g = o.grad().data();
                double* gp = pe.grad().data();
                for (int b = 0; b < B; ++b) {
                    for (long i = 0; i < static_cast<long>(rows) * d; ++i) {
                        gp[i] += g[static_cast<long>(b) * rows * d + i];
                    }
                }
            };
        }
    }
    x = add(x, pos);

    for (int i = 0; i < m.cfg.dec_layers; ++i) {
        const std::string pre = "dec." + std::to_string(i) + ".";
        Tensor h1 = layer_norm(x, P(pre + "ln1.g"), P(pre + "ln1.b"));
        Tensor sa = attention(matmul(h1, P(pre + "self.wq")), matmul(h1, P(pre + "self.wk")),
                              matmul(h1, P(pre + "self.wv")), B, rows, rows, m.cfg.n_heads, true);
        Tensor sa_out = matmul(sa, P(pre + "self.wo"));
        tap_point(sa_out, i, Module::self_attn_out);
        x = add(x, sa_out);

        Tensor h2 = layer_norm(x, P(pre + "ln2.g"), P(pre + "ln2.b"));
        Tensor ca = attention(matmul(h2, P(pre + "cross.wq")), matmul(enc.memory, P(pre + "cross.wk")),
                              matmul(enc.memory, P(pre + "cross.wv")), B, rows, enc.src_len, m.cfg.n_heads,
                              false);
        Tensor ca_out = matmul(ca, P(pre + "cross.wo"));
        tap_point(ca_out, i, Module::cross_attn_out);
        x = add(x, ca_out);

        Tensor h3 = layer_norm(x, P(pre + "ln3.g"), P(pre + "ln3.b"));
        tap_point(h3, i, Module::ffn_in);
        Tensor key = detail::act(add(matmul(h3, P(pre + "ffn.w_in")), P(pre + "ffn.b_in")), m.cfg.activation);
        tap_point(key, i, Module::ffn_key);
        Tensor ffn_out = matmul(key, P(pre + "ffn.w_out"));
        tap_point(ffn_out, i, Module::ffn_out);
        x = add(x, ffn_out);
        tap_point(x, i, Module::hidden);
    }
    x = layer_norm(x, P("dec_final_ln.g"), P("dec_final_ln.b"));
    out.logits = add(matmul(x, P("out_proj")), P("out_bias"));
    return out;
}

// Single-sample teacher-forced pass. target_prefix holds y_{<t}; the decoder
// input is [bos, y_0, .., y_{t-1}] so the final logits row predicts y_t.
inline DecodeResult forward(const GrModel& m, const std::vector<int>& source,
                            const std::vector<int>& target_prefix, const ForwardOptions& opt = {}) {
    EncodeResult enc = encode_batch(m, {&source}, opt.grad_params);
    std::vector<int> dec_in;
    dec_in.reserve(target_prefix.size() + 1);
    dec_in.push_back(m.cfg.vocab().bos());
    dec_in.insert(dec_in.end(), target_prefix.begin(), target_prefix.end());
    return decode_batch(m, enc, {dec_in}, opt);
}

// ---------------------------------------------------------------------------
// segment masking helpers
// ---------------------------------------------------------------------------

// additive mask: 0 on the position's valid segment, -1e30 elsewhere
inline Tensor segment_mask(const docid::DocIdVocab& v, int rows) {
    const int V = v.size();
    Tensor mask({rows, V}, -1e30);
    for (int r = 0; r < rows; ++r) {
        auto [b, e] = v.segment(r);
        for (int t = b; t < e; ++t) { mask.ptr()[static_cast<long>(r) * V + t] = 0.0; }
    }
    return mask;
}

// mask tiled across a batch: [B*rows, V]
inline Tensor segment_mask_batch(const docid::DocIdVocab& v, int batch, int rows) {
    Tensor one = segment_mask(v, rows);
    const int V = v.size();
    Tensor out({batch * rows, V});
    for (int b = 0; b < batch; ++b) {
        std::memcpy(out.ptr() + static_cast<long>(b) * rows * V, one.ptr(), sizeof(double) * rows * V);
    }
    return out;
}

// segment-restricted probabilities of one logit row (no graph)
inline std::vector<double> segment_probs(const double* logits_row, const docid::DocIdVocab& v, int position) {
    auto [b, e] = v.segment(position);
    std::vector<double> p(v.size(), 0.0);
    double mx = logits_row[b];
    for (int t = b; t < e; ++t) { mx = std::max(mx, logits_row[t]); }
    double sum = 0.0;
    for (int t = b; t < e; ++t) {
        p[t] = std::exp(logits_row[t] - mx);
        sum += p[t];
    }
    for (int t = b; t < e; ++t) { p[t] /= sum; }
    return p;
}

// segment-restricted log-probability of one token
inline double segment_logprob(const double* logits_row, const docid::DocIdVocab& v, int position, int token) {
    auto [b, e] = v.segment(position);
    double mx = logits_row[b];
    for (int t = b; t < e; ++t) { mx = std::max(mx, logits_row[t]); }
    double sum = 0.0;
    for (int t = b; t < e; ++t) { sum += std::exp(logits_row[t] - mx); }
    return logits_row[token] - mx - std::log(sum);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

enum class TaskTag { query2id, doc2id, pseudo2id };

// One supervised example: source token sequence paired with the full docID
// token sequence.
struct TrainBatch {
    std::vector<int> source;
    std::vector<int> target; // docID tokens (length tgt_len)
    TaskTag tag = TaskTag::query2id;
};

struct TrainConfig {
    double lr = 3e-4;
    int batch_size = 64;
    int epochs = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> epoch_loss;
    double wall_seconds = 0.0;
    long steps = 0;
};

// deterministic length-bucketed minibatches over a shuffled sample order
inline std::vector<std::vector<int>> make_batches(const std::vector<TrainBatch>& data, int batch_size,
                                                  std::mt19937_64& rng) {
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::map<int, std::vector<int>> buckets; // source length -> indexes
    for (int idx : order) { buckets[static_cast<int>(data[idx].source.size())].push_back(idx); }
    std::vector<std::vector<int>> batches;
    for (auto& [len, idxs] : buckets) {
        for (size_t i = 0; i < idxs.size(); i += batch_size) {
            batches.emplace_back(idxs.begin() + i, idxs.begin() + std::min(idxs.size(), i + batch_size));
        }
    }
    // interleave buckets deterministically
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

// Negative log-likelihood over the docID sequence, summed over positions and
// averaged over the batch; one Adam step per minibatch.
inline TrainLog train(GrModel& m, const std::vector<TrainBatch>& data, const TrainConfig& cfg) {
    using namespace numerics;
    if (data.empty()) { fail(ErrorKind::config, "train: empty data"); }
    const auto vocab = m.cfg.vocab();
    const int L = m.cfg.tgt_len();
    const int V = vocab.size();
    for (const TrainBatch& b : data) {
        if (static_cast<int>(b.target.size()) != L) {
            fail(ErrorKind::config, "train: target length != docID length");
        }
    }
    TrainLog log;
    if (cfg.epochs == 0) { return log; }
    const auto t0 = std::chrono::steady_clock::now();

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.beta1 = cfg.beta1;
    acfg.beta2 = cfg.beta2;
    AdamState adam(acfg);
    std::vector<Tensor> params = m.all_params();
    adam.init(params);
    std::mt19937_64 rng(sub_seed(cfg.seed, "train"));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = make_batches(data, cfg.batch_size, rng);
        double epoch_loss = 0.0;
        long n_seq = 0;
        for (const auto& batch : batches) {
            const int B = static_cast<int>(batch.size());
            std::vector<const std::vector<int>*> sources(B);
            std::vector<std::vector<int>> dec_in(B);
            Tensor target_dist({B * L, V});
            for (int b = 0; b < B; ++b) {
                const TrainBatch& ex = data[batch[b]];
                sources[b] = &ex.source;
                dec_in[b].push_back(vocab.bos());
                for (int r = 0; r + 1 < L; ++r) { dec_in[b].push_back(ex.target[r]); }
                for (int r = 0; r < L; ++r) {
                    target_dist.ptr()[(static_cast<long>(b) * L + r) * V + ex.target[r]] = 1.0;
                }
            }
            EncodeResult enc = encode_batch(m, sources, true);
            ForwardOptions opt;
            opt.grad_params = true;
            DecodeResult dec = decode_batch(m, enc, dec_in, opt);
            Tensor masked = add(dec.logits, segment_mask_batch(vocab, B, L));
            Tensor losses = cross_entropy_rows(masked, target_dist);
            Tensor loss = scale(sum(losses), 1.0 / B);
            const double loss_val = loss.at(0);
            if (!std::isfinite(loss_val)) {
                fail(ErrorKind::numeric, "train: non-finite loss at epoch " + std::to_string(epoch) +
                                             " step " + std::to_string(log.steps));
            }
            m.zero_grads();
            backward(loss);
            adam_step(adam, params);
            epoch_loss += loss_val * B;
            n_seq += B;
            log.steps += 1;
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(n_seq));
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

struct ScoredDoc {
    long doc_key = -1;
    double log_prob = 0.0;
    std::vector<int> tokens;
};

// Trie-constrained beam search. Expands only trie-valid tokens; ranks by
// total sequence log-probability with lexicographic tie-breaks.
inline std::vector<ScoredDoc> beam_retrieve(const GrModel& m, const std::vector<int>& query,
                                            const docid::DocIdTrie& trie, int beam_k) {
    using namespace numerics;
    if (trie.empty()) { fail(ErrorKind::config, "beam_retrieve: empty trie"); }
    if (beam_k < 1) { fail(ErrorKind::config, "beam_retrieve: beam width must be >= 1"); }
    NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    EncodeResult enc1 = encode_batch(m, {&query});

    struct Beam {
        std::vector<int> tokens;
        double lp = 0.0;
    };
    std::vector<Beam> beams = {{{}, 0.0}};
    const int L = m.cfg.tgt_len();
    for (int t = 0; t < L; ++t) {
        const int B = static_cast<int>(beams.size());
        // tile the encoder memory across beams
        EncodeResult enc;
        enc.batch = B;
        enc.src_len = enc1.src_len;
        enc.memory = Tensor({B * enc1.src_len, m.cfg.d_model});
        for (int b = 0; b < B; ++b) {
            std::memcpy(enc.memory.ptr() + static_cast<long>(b) * enc1.memory.numel(), enc1.memory.ptr(),
                        sizeof(double) * enc1.memory.numel());
        }
        std::vector<std::vector<int>> dec_in(B);
        for (int b = 0; b < B; ++b) {
            dec_in[b].push_back(vocab.bos());
            dec_in[b].insert(dec_in[b].end(), beams[b].tokens.begin(), beams[b].tokens.end());
        }
        DecodeResult dec = decode_batch(m, enc, dec_in);
        struct Cand {
            std::vector<int> tokens;
            double lp;
        };
        std::vector<Cand> cands;
        for (int b = 0; b < B; ++b) {
            const double* row = dec.logits.ptr() + (static_cast<long>(b) * (t + 1) + t) * vocab.size();
            for (int tok : trie.valid_next(beams[b].tokens)) {
                Cand c;
                c.tokens = beams[b].tokens;
                c.tokens.push_back(tok);
                c.lp = beams[b].lp + segment_logprob(row, vocab, t, tok);
                cands.push_back(std::move(c));
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.lp != b.lp) { return a.lp > b.lp; }
            return a.tokens < b.tokens;
        });
        beams.clear();
        for (size_t i = 0; i < cands.size() && static_cast<int>(i) < beam_k; ++i) {
            beams.push_back({std::move(cands[i].tokens), cands[i].lp});
        }
        if (beams.empty()) { break; }
    }
    std::vector<ScoredDoc> out;
    for (const Beam& b : beams) {
        if (static_cast<int>(b.tokens.size()) != L) { continue; }
        ScoredDoc sd;
        sd.doc_key = trie.leaf_key(b.tokens);
        sd.log_prob = b.lp;
        sd.tokens = b.tokens;
        out.push_back(std::move(sd));
    }
    return out;
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

// Teacher-forced accuracy of token `position` given the gold prefix.
inline double token_accuracy(const GrModel& m,
                             const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                             int position) {
    using namespace numerics;
    if (pairs.empty()) { return 0.0; }
    if (position >= m.cfg.tgt_len()) { fail(ErrorKind::config, "token_accuracy: position out of range"); }
    NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    // bucket by source length
    std::map<int, std::vector<int>> buckets;
    for (size_t i = 0; i < pairs.size(); ++i) {
        buckets[static_cast<int>(pairs[i].first.size())].push_back(static_cast<int>(i));
    }
    long correct = 0;
    for (const auto& [len, idxs] : buckets) {
        for (size_t start = 0; start < idxs.size(); start += 128) {
            const size_t end = std::min(idxs.size(), start + 128);
            const int B = static_cast<int>(end - start);
            std::vector<const std::vector<int>*> sources(B);
            std::vector<std::vector<int>> dec_in(B);
            for (int b = 0; b < B; ++b) {
                const auto& [q, tgt] = pairs[idxs[start + b]];
                sources[b] = &q;
                dec_in[b].push_back(vocab.bos());
                for (int r = 0; r < position; ++r) { dec_in[b].push_back(tgt[r]); }
            }
            EncodeResult enc = encode_batch(m, sources);
            DecodeResult dec = decode_batch(m, enc, dec_in);
            const int rows = position + 1;
            for (int b = 0; b < B; ++b) {
                const double* row = dec.logits.ptr() + (static_cast<long>(b) * rows + position) * vocab.size();
                auto [sb, se] = vocab.segment(position);
                int arg = sb;
                for (int tkn = sb; tkn < se; ++tkn) {
                    if (row[tkn] > row[arg]) { arg = tkn; }
                }
                if (arg == pairs[idxs[start + b]].second[position]) { ++correct; }
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// Teacher-forced probability of each gold token (used by editing/patching).
inline std::vector<double> gold_token_probs(const GrModel& m, const std::vector<int>& query,
                                            const std::vector<int>& target) {
    numerics::NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    const std::vector<int> prefix(target.begin(), target.end() - 1);
    DecodeResult dec = forward(m, query, prefix);
    std::vector<double> out;
    const int rows = static_cast<int>(target.size());
    for (int t = 0; t < rows; ++t) {
        const double* row = dec.logits.ptr() + static_cast<long>(t) * vocab.size();
        out.push_back(segment_probs(row, vocab, t)[target[t]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const GrModel& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) { fail(ErrorKind::io, "save_checkpoint: cannot open " + path); }
    const std::string header = m.cfg.to_json().dump();
    const char magic[8] = {'G', 'R', 'E', 'D', 'C', 'K', 'P', '1'};
    out.write(magic, 8);
    const uint64_t hlen = header.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(header.data(), static_cast<std::streamsize>(hlen));
    const uint64_t n_params = m.named_params().size();
    out.write(reinterpret_cast<const char*>(&n_params), 8);
    for (const auto& [name, t] : m.named_params()) {
        const uint64_t nlen = name.size();
        out.write(reinterpret_cast<const char*>(&nlen), 8);
        out.write(name.data(), static_cast<std::streamsize>(nlen));
        const uint64_t count = t.numel();
        out.write(reinterpret_cast<const char*>(&count), 8);
        out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(count * 8));
    }
}

inline GrModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) { fail(ErrorKind::artifact, "load_checkpoint: cannot open " + path); }
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "GREDCKP1", 8) != 0) {
        fail(ErrorKind::artifact, "load_checkpoint: bad magic in " + path);
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    ModelConfig cfg = ModelConfig::from_json(json::parse(header));
    GrModel m = init_model(cfg);
    uint64_t n_params = 0;
    in.read(reinterpret_cast<char*>(&n_params), 8);
    if (n_params != m.named_params().size()) {
        fail(ErrorKind::artifact, "load_checkpoint: parameter count mismatch");
    }
    for (uint64_t i = 0; i < n_params; ++i) {
        uint64_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), 8);
        std::string name(nlen, '\0');
        in.read(name.data(), static_cast<std::streamsize>(nlen));
        uint64_t count = 0;
        in.read(reinterpret_cast<char*>(&count), 8);
        Tensor& t = m.param(name);
        if (count != static_cast<uint64_t>(t.numel())) {
            fail(ErrorKind::artifact, "load_checkpoint: size mismatch for " + name);
        }
        in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(count * 8));
        if (!in) { fail(ErrorKind::artifact, "load_checkpoint: truncated file at " + name); }
    }
    return m;
}

// load with a config expectation; mismatch is an error
inline GrModel load_checkpoint_expect(const std::string& path, const ModelConfig& expected) {
    GrModel m = load_checkpoint(path);
    if (!(m.cfg == expected)) {
        fail(ErrorKind::artifact, "load_checkpoint: config mismatch for " + path);
    }
    return m;
}

} // namespace gred::grmodel
