// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gred/grmodel.hpp"

namespace gred::patching {

using grmodel::GrModel;
using grmodel::Module;
using grmodel::TapKey;

// (query tokens, full docID token sequence)
using LabeledQuery = std::pair<std::vector<int>, std::vector<int>>;

// Mean module outputs at each decoding position over a reference set.
struct AvgBank {
    std::map<TapKey, std::vector<double>> mean;
    long ref_count = 0;

    const std::vector<double>& at(const TapKey& k) const {
        auto it = mean.find(k);
        if (it == mean.end()) {
            fail(ErrorKind::config, "avg bank missing (" + std::to_string(k.layer) + "," +
                                        grmodel::module_name(k.module) + "," + std::to_string(k.position) + ")");
        }
        return it->second;
    }
};

// batches labeled queries by source length for the uniform-length forward
inline std::map<int, std::vector<int>> length_buckets(const std::vector<LabeledQuery>& items) {
    std::map<int, std::vector<int>> buckets;
    for (size_t i = 0; i < items.size(); ++i) {
        buckets[static_cast<int>(items[i].first.size())].push_back(static_cast<int>(i));
    }
    return buckets;
}

// Arithmetic mean of the captured outputs at each (layer, module, position)
// over the reference queries, teacher-forced on their gold docIDs.
inline AvgBank collect_avg_outputs(const GrModel& m, const std::vector<LabeledQuery>& reference,
                                   const std::vector<Module>& modules, const std::vector<int>& positions,
                                   int batch_size = 128) {
    using namespace numerics;
    if (reference.empty()) { fail(ErrorKind::config, "collect_avg_outputs: empty reference set"); }
    NoGradGuard ng;
    const int L = m.cfg.tgt_len();
    const auto vocab = m.cfg.vocab();
    grmodel::ForwardOptions opt;
    for (int layer = 0; layer < m.cfg.dec_layers; ++layer) {
        for (Module mod : modules) {
            for (int pos : positions) { opt.taps.push_back({layer, mod, pos}); }
        }
    }
    AvgBank bank;
    bank.ref_count = static_cast<long>(reference.size());
    for (const auto& [len, idxs] : length_buckets(reference)) {
        for (size_t start = 0; start < idxs.size(); start += batch_size) {
            const size_t end = std::min(idxs.size(), start + batch_size);
            const int B = static_cast<int>(end - start);
            std::vector<const std::vector<int>*> sources(B);
            std::vector<std::vector<int>> dec_in(B);
            for (int b = 0; b < B; ++b) {
                const auto& [q, tgt] = reference[idxs[start + b]];
                sources[b] = &q;
                dec_in[b].push_back(vocab.bos());
                for (int r = 0; r + 1 < L; ++r) { dec_in[b].push_back(tgt[r]); }
            }
            grmodel::EncodeResult enc = grmodel::encode_batch(m, sources);
            grmodel::DecodeResult dec = grmodel::decode_batch(m, enc, dec_in, opt);
            for (const auto& [key, cap] : dec.captures.values) {
                auto& acc = bank.mean[key];
                if (acc.empty()) { acc.assign(cap.cols(), 0.0); }
                for (int b = 0; b < B; ++b) {
                    for (int j = 0; j < cap.cols(); ++j) { acc[j] += cap.at(b, j); }
                }
            }
        }
    }
    for (auto& [key, acc] : bank.mean) {
        for (double& x : acc) { x /= static_cast<double>(bank.ref_count); }
    }
    return bank;
}

// Mean gold-token probability at position t when (layer, module) is patched
// with the bank average. Pass layer = -1 for the unpatched baseline.
inline double patch_eval(const GrModel& m, const std::vector<LabeledQuery>& eval_set, const AvgBank& bank,
                         int layer, Module module, int position, int batch_size = 128) {
    using namespace numerics;
    NoGradGuard ng;
    const auto vocab = m.cfg.vocab();
    grmodel::ForwardOptions opt;
    if (layer >= 0) {
        const std::vector<double>& avg = bank.at({layer, module, position});
        opt.overrides.push_back(
            {{layer, module, position}, Tensor::from({static_cast<int>(avg.size())}, avg)});
    }
    double total = 0.0;
    for (const auto& [len, idxs] : length_buckets(eval_set)) {
        for (size_t start = 0; start < idxs.size(); start += batch_size) {
            const size_t end = std::min(idxs.size(), start + batch_size);
            const int B = static_cast<int>(end - start);
            std::vector<const std::vector<int>*> sources(B);
            std::vector<std::vector<int>> dec_in(B);
            for (int b = 0; b < B; ++b) {
                const auto& [q, tgt] = eval_set[idxs[start + b]];
                sources[b] = &q;
                dec_in[b].push_back(vocab.bos());
                for (int r = 0; r < position; ++r) { dec_in[b].push_back(tgt[r]); }
            }
            grmodel::EncodeResult enc = grmodel::encode_batch(m, sources);
            grmodel::DecodeResult dec = grmodel::decode_batch(m, enc, dec_in, opt);
            const int rows = position + 1;
            for (int b = 0; b < B; ++b) {
                const double* row = dec.logits.ptr() + (static_cast<long>(b) * rows + position) * vocab.size();
                const int gold = eval_set[idxs[start + b]].second[position];
                total += grmodel::segment_probs(row, vocab, position)[gold];
            }
        }
    }
    return total / static_cast<double>(eval_set.size());
}

struct PatchReport {
    int dec_layers = 0;
    std::vector<int> positions;
    std::vector<Module> modules;
    std::map<TapKey, double> p_correct;
    std::map<int, double> baseline; // per position: unpatched gold probability
    int window_lo = -1;
    int window_hi = -1;

    double drop(int layer, Module module, int position) const {
        return baseline.at(position) - p_correct.at({layer, module, position});
    }

    // mean FFN drop over positions for one layer
    double ffn_drop(int layer) const {
        double acc = 0.0;
        for (int t : positions) { acc += drop(layer, Module::ffn_out, t); }
        return acc / static_cast<double>(positions.size());
    }
};

// Full average-patching sweep over (layer, module, position).
inline PatchReport run_patching(const GrModel& m, const std::vector<LabeledQuery>& reference,
                                const std::vector<LabeledQuery>& eval_set,
                                const std::vector<Module>& modules, const std::vector<int>& positions) {
    PatchReport rep;
    rep.dec_layers = m.cfg.dec_layers;
    rep.positions = positions;
    rep.modules = modules;
    AvgBank bank = collect_avg_outputs(m, reference, modules, positions);
    for (int t : positions) { rep.baseline[t] = patch_eval(m, eval_set, bank, -1, Module::ffn_out, t); }
    for (int layer = 0; layer < m.cfg.dec_layers; ++layer) {
        for (Module mod : modules) {
            for (int t : positions) {
                rep.p_correct[{layer, mod, t}] = patch_eval(m, eval_set, bank, layer, mod, t);
            }
        }
    }
    return rep;
}

// Contiguous window of width w maximizing the summed FFN accuracy drop,
// aggregated as the mean over positions; ties resolve toward deeper layers.
inline std::pair<int, int> select_critical_window(const PatchReport& rep, int w = 5) {
    if (rep.dec_layers < w) {
        fail(ErrorKind::config, "select_critical_window: decoder depth " + std::to_string(rep.dec_layers) +
                                    " < window " + std::to_string(w));
    }
    int best_lo = 0;
    double best_score = -1e300;
    for (int lo = 0; lo + w <= rep.dec_layers; ++lo) {
        double score = 0.0;
        for (int l = lo; l < lo + w; ++l) { score += rep.ffn_drop(l); }
        // >= : exact ties resolve toward the deeper window
        if (score >= best_score) {
            best_score = score;
            best_lo = lo;
        }
    }
    return {best_lo, best_lo + w - 1};
}

inline void save_patch_report_csv(const PatchReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) { fail(ErrorKind::io, "save_patch_report_csv: cannot open " + path); }
    out << "position,layer,module,p_correct,baseline,drop\n";
    char buf[160];
    for (int t : rep.positions) {
        for (int layer = 0; layer < rep.dec_layers; ++layer) {
            for (Module mod : rep.modules) {
                const double p = rep.p_correct.at({layer, mod, t});
                std::snprintf(buf, sizeof(buf), "%d,%d,%s,%.6f,%.6f,%.6f\n", t, layer,
                              grmodel::module_name(mod).c_str(), p, rep.baseline.at(t),
                              rep.baseline.at(t) - p);
                out << buf;
            }
        }
    }
}

} // namespace gred::patching
