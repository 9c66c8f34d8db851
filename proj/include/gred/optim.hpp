// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "gred/tensor.hpp"

namespace gred::numerics {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers, one pair per parameter tensor.
struct AdamState {
    AdamConfig cfg;
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    explicit AdamState(AdamConfig c = {}) : cfg(c) {}

    void init(const std::vector<Tensor>& params) {
        m.clear();
        v.clear();
        for (const Tensor& p : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
        step = 0;
    }
};

// Standard Adam update from the gradients currently stored on the params.
// Parameters without an allocated gradient buffer are treated as zero-grad.
inline void adam_step(AdamState& state, std::vector<Tensor>& params) {
    if (state.m.size() != params.size()) {
        fail(ErrorKind::numeric, "adam_step: state not initialized for this parameter set");
    }
    state.step += 1;
    const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    const double lr = state.cfg.lr, eps = state.cfg.eps;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        if (state.m[pi].size() != static_cast<size_t>(p.numel())) {
            fail(ErrorKind::numeric, "adam_step: moment shape mismatch for parameter " + std::to_string(pi));
        }
        if (!p.has_grad()) { continue; }
        const std::vector<double>& g = p.grad();
        std::vector<double>& m = state.m[pi];
        std::vector<double>& v = state.v[pi];
        double* x = p.ptr();
        const long n = p.numel();
        for (long i = 0; i < n; ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi)) {
                fail(ErrorKind::numeric, "adam_step: non-finite gradient (divergence) in parameter " +
                                             std::to_string(pi));
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

} // namespace gred::numerics
