// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "gred/tensor.hpp"

namespace gred::numerics {

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
// Throws when a pivot is not strictly positive.
inline std::vector<double> cholesky(const std::vector<double>& a, int n) {
    std::vector<double> l(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<long>(i) * n + j];
            for (int p = 0; p < j; ++p) { s -= l[static_cast<long>(i) * n + p] * l[static_cast<long>(j) * n + p]; }
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s)) {
                    fail(ErrorKind::numeric,
                         "cholesky: matrix not positive definite (pivot " + std::to_string(s) +
                             " at " + std::to_string(i) + "); pass eps > 0 to regularize");
                }
                l[static_cast<long>(i) * n + i] = std::sqrt(s);
            } else {
                l[static_cast<long>(i) * n + j] = s / l[static_cast<long>(j) * n + j];
            }
        }
    }
    return l;
}

// Solves L L^T x = b in place (b holds x on return).
inline void cholesky_solve_inplace(const std::vector<double>& l, int n, double* b) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int p = 0; p < i; ++p) { s -= l[static_cast<long>(i) * n + p] * b[p]; }
        b[i] = s / l[static_cast<long>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int p = i + 1; p < n; ++p) { s -= l[static_cast<long>(p) * n + i] * b[p]; }
        b[i] = s / l[static_cast<long>(i) * n + i];
    }
}

// Default ridge regularizer for a d0 x d0 gram matrix.
inline double default_ridge_eps(const Tensor& m) {
    const int n = m.rows();
    double tr = 0.0;
    for (int i = 0; i < n; ++i) { tr += m.at(i, i); }
    return 1e-6 * tr / static_cast<double>(n);
}

// Solves X (M + eps I) = R for X, with M symmetric PSD [d0 x d0] and
// R [d1 x d0]. Uses an SPD factorization; eps > 0 is required when M is
// singular.
inline Tensor ridge_solve(const Tensor& r, const Tensor& m, double eps) {
    if (m.shape().size() != 2 || m.rows() != m.cols()) {
        detail::shape_error("ridge_solve", m, "M must be square");
    }
    if (r.shape().size() != 2 || r.cols() != m.rows()) { detail::shape_error("ridge_solve", r, m); }
    if (eps < 0.0) { fail(ErrorKind::numeric, "ridge_solve: eps must be >= 0"); }
    const int d0 = m.rows();
    const int d1 = r.rows();
    std::vector<double> a(m.vec());
    for (int i = 0; i < d0; ++i) { a[static_cast<long>(i) * d0 + i] += eps; }
    const std::vector<double> l = cholesky(a, d0);
    // (M + eps I) X^T = R^T, one solve per row of R
    Tensor x({d1, d0});
    const double* rp = r.ptr();
    double* xp = x.ptr();
    parallel_for(d1, [&](long i) {
        std::vector<double> col(d0);
        for (int j = 0; j < d0; ++j) { col[j] = rp[i * d0 + j]; }
        cholesky_solve_inplace(l, d0, col.data());
        for (int j = 0; j < d0; ++j) { xp[i * d0 + j] = col[j]; }
    });
    return x;
}

inline double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double x : a.vec()) { s += x * x; }
    return std::sqrt(s);
}

// C = A * B for plain (non-graph) tensors
inline Tensor mat_product(const Tensor& a, const Tensor& b) {
    NoGradGuard ng;
    return matmul(a, b);
}

// A * A^T, the gram matrix of row space; for column-stacked key matrices use
// gram_cols.
inline Tensor gram_cols(const Tensor& a) {
    // a: [d, u] -> a a^T: [d, d]
    NoGradGuard ng;
    const int d = a.rows(), u = a.cols();
    Tensor out({d, d});
    const double* ap = a.ptr();
    double* op = out.ptr();
    parallel_for(d, [&](long i) {
        for (int j = 0; j <= i; ++j) {
            double acc = 0.0;
            const double* ri = ap + i * u;
            const double* rj = ap + static_cast<long>(j) * u;
            for (int p = 0; p < u; ++p) { acc += ri[p] * rj[p]; }
            op[i * d + j] = acc;
            op[static_cast<long>(j) * d + i] = acc;
        }
    });
    return out;
}

} // namespace gred::numerics
