// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <vector>

#include "gred/editing.hpp"
#include "gred/grmodel.hpp"

namespace gred::baselines {

using editing::DomeConfig;
using editing::EditPlan;
using editing::EditRequest;
using editing::HybridSchedule;
using grmodel::GrModel;

struct FinetuneConfig {
    double lr = 3e-4;
    int epochs = 8;
    int batch_size = 64;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) { fail(ErrorKind::config, "finetune: epochs must be >= 0"); }
    }
};

struct FinetuneResult {
    grmodel::TrainLog log;
    double wall_seconds = 0.0;
};

// New-Doc FT: continue likelihood training on new-document supervision only
// (queries and pseudo-queries targeting the new docIDs).
inline FinetuneResult newdoc_finetune(GrModel& m, const std::vector<grmodel::TrainBatch>& new_doc_data,
                                      const FinetuneConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    grmodel::TrainConfig tc;
    tc.lr = cfg.lr;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    FinetuneResult out;
    if (cfg.epochs > 0) { out.log = grmodel::train(m, new_doc_data, tc); }
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// "w/o soft label": the hybrid schedule pinned to lambda = 1 at every step.
inline EditPlan hard_label_edit(GrModel& m, const std::vector<EditRequest>& requests,
                                const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                                int window_lo, int window_hi, DomeConfig cfg) {
    cfg.schedule = HybridSchedule::constant(1.0, cfg.schedule.steps);
    return editing::apply_dome(m, requests, pairs, window_lo, window_hi, cfg);
}

// "w/o hard label": lambda frozen at its initial value, never ramped.
inline EditPlan soft_only_edit(GrModel& m, const std::vector<EditRequest>& requests,
                               const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                               int window_lo, int window_hi, DomeConfig cfg) {
    cfg.schedule = HybridSchedule::constant(cfg.schedule.lambda0, cfg.schedule.steps);
    return editing::apply_dome(m, requests, pairs, window_lo, window_hi, cfg);
}

} // namespace gred::baselines
