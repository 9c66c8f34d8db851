// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "gred/common.hpp"

namespace gred::numerics {

using Shape = std::vector<int>;

class Tensor;
struct Node;

// Define-by-run tape: each op that sees a gradient-bearing input attaches a
// Node holding the parent tensors and a backward closure. backward() walks
// the resulting DAG in reverse topological order.
struct Node {
    const char* op = "";
    std::vector<Tensor> parents;
    std::function<void(const Tensor& out)> backward;
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

// RAII guard: disables graph recording on this thread (eval-only passes).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
    // Data and its gradient share one storage block so every copy of a
    // tensor (including the copies held inside graph nodes) sees the same
    // gradient buffer.
    struct Storage {
        std::vector<double> data;
        std::shared_ptr<std::vector<double>> grad;
    };

  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : shape_(std::move(shape)), st_(std::make_shared<Storage>()), requires_grad_(requires_grad) {
        st_->data.assign(numel_of(shape_), fill);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (values.size() != static_cast<size_t>(numel_of(t.shape_))) {
            fail(ErrorKind::numeric, "Tensor::from: data length does not match shape");
        }
        t.st_ = std::make_shared<Storage>();
        t.st_->data = std::move(values);
        t.requires_grad_ = requires_grad;
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false) {
        Tensor t(std::move(shape), 0.0, requires_grad);
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& x : t.st_->data) { x = dist(rng); }
        return t;
    }

    const Shape& shape() const { return shape_; }
    long numel() const { return numel_of(shape_); }
    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }
    bool defined() const { return st_ != nullptr; }

    const std::vector<double>& vec() const { return st_->data; }
    std::vector<double>& vec() { return st_->data; }
    const double* ptr() const { return st_->data.data(); }
    double* ptr() { return st_->data.data(); }
    double at(long i) const { return st_->data[i]; }
    double at(int r, int c) const { return st_->data[static_cast<long>(r) * cols() + c]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool rg) { requires_grad_ = rg; }

    // Shares storage, drops grad tracking. Used for frozen-parameter passes.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.st_ = st_;
        t.requires_grad_ = false;
        return t;
    }

    bool has_grad() const { return st_->grad != nullptr; }
    std::vector<double>& grad() {
        ensure_grad();
        return *st_->grad;
    }
    const std::vector<double>& grad() const { return *st_->grad; }
    void ensure_grad() const {
        if (!st_->grad) { st_->grad = std::make_shared<std::vector<double>>(numel(), 0.0); }
    }
    void zero_grad() {
        if (st_->grad) { std::fill(st_->grad->begin(), st_->grad->end(), 0.0); }
    }

    std::shared_ptr<Node> node;

    bool all_finite() const {
        for (double x : st_->data) {
            if (!std::isfinite(x)) { return false; }
        }
        return true;
    }

    static long numel_of(const Shape& s) {
        long n = 1;
        for (int d : s) { n *= d; }
        return s.empty() ? 0 : n;
    }

    static std::string shape_str(const Shape& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) { os << (i ? "x" : "") << s[i]; }
        os << "]";
        return os.str();
    }

  private:
    Shape shape_;
    std::shared_ptr<Storage> st_;
    bool requires_grad_ = false;
};

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    fail(ErrorKind::numeric, std::string(op) + ": shape mismatch " + Tensor::shape_str(a.shape()) +
                                 " vs " + Tensor::shape_str(b.shape()));
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const std::string& why) {
    fail(ErrorKind::numeric,
         std::string(op) + ": " + why + " (got " + Tensor::shape_str(a.shape()) + ")");
}

inline bool track(std::initializer_list<const Tensor*> inputs) {
    if (!grad_mode()) { return false; }
    for (const Tensor* t : inputs) {
        if (t->requires_grad() || t->node) { return true; }
    }
    return false;
}

inline void attach(Tensor& out, const char* op, std::vector<Tensor> parents,
                   std::function<void(const Tensor&)> backward) {
    out.set_requires_grad(true);
    out.node = std::make_shared<Node>();
    out.node->op = op;
    out.node->parents = std::move(parents);
    out.node->backward = std::move(backward);
}

inline bool needs(const Tensor& t) { return t.requires_grad() || t.node; }

} // namespace detail

// ---------------------------------------------------------------------------
// operators
// ---------------------------------------------------------------------------

// C[m,n] = A[m,k] * B[k,n]. Row partition keeps results independent of the
// thread count.
inline void matmul_raw(const double* a, const double* b, double* c, int m, int k, int n) {
    const double cost = 2.0 * m * k * n;
    parallel_for(m, [&](long i) {
        double* crow = c + i * n;
        std::memset(crow, 0, sizeof(double) * n);
        const double* arow = a + i * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) { continue; }
            const double* brow = b + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) { crow[j] += av * brow[j]; }
        }
    }, cost);
}

// C[m,n] = A[m,k] * B[n,k]^T
inline void matmul_nt_raw(const double* a, const double* b, double* c, int m, int k, int n) {
    const double cost = 2.0 * m * k * n;
    parallel_for(m, [&](long i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<long>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) { acc += arow[p] * brow[p]; }
            crow[j] = acc;
        }
    }, cost);
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void matmul_tn_acc_raw(const double* a, const double* b, double* c, int m, int k, int n) {
    const double cost = 2.0 * m * k * n;
    parallel_for(k, [&](long p) {
        double* crow = c + p * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<long>(i) * k + p];
            if (av == 0.0) { continue; }
            const double* brow = b + static_cast<long>(i) * n;
            for (int j = 0; j < n; ++j) { crow[j] += av * brow[j]; }
        }
    }, cost);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        detail::shape_error("matmul", a, b);
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n});
    matmul_raw(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (detail::track({&a, &b})) {
        detail::attach(out, "matmul", {a, b}, [m, k, n](const Tensor& o) {
            Tensor a = o.node->parents[0];
            Tensor b = o.node->parents[1];
            if (detail::needs(a)) {
                // dA += dC * B^T
                a.ensure_grad();
                const double* g = o.grad().data();
                const double* bp = b.ptr();
                double* ga = a.grad().data();
                parallel_for(m, [&](long i) {
                    const double* grow = g + i * n;
                    double* garow = ga + i * k;
                    for (int p = 0; p < k; ++p) {
                        const double* brow = bp + static_cast<long>(p) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) { acc += grow[j] * brow[j]; }
                        garow[p] += acc;
                    }
                }, 2.0 * m * k * n);
            }
            if (detail::needs(b)) {
                // dB += A^T * dC
                b.ensure_grad();
                matmul_tn_acc_raw(a.ptr(), o.grad().data(), b.grad().data(), m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) { detail::shape_error("transpose", a, "expected 2-d tensor"); }
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    const double* ap = a.ptr();
    double* op = out.ptr();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) { op[static_cast<long>(j) * m + i] = ap[static_cast<long>(i) * n + j]; }
    }
    if (detail::track({&a})) {
        detail::attach(out, "transpose", {a}, [m, n](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            double* ga = a.grad().data();
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) { ga[static_cast<long>(i) * n + j] += g[static_cast<long>(j) * m + i]; }
            }
        });
    }
    return out;
}

namespace detail {
enum class AddKind { same, row, col };
}

// add supports [m,n]+[m,n], [m,n]+[n] / [1,n] (row vector), [m,n]+[m,1] (col).
inline Tensor add(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), n = a.cols();
    detail::AddKind kind;
    if (a.shape() == b.shape()) {
        kind = detail::AddKind::same;
    } else if ((b.shape().size() == 1 && b.shape()[0] == n) ||
               (b.shape().size() == 2 && b.shape()[0] == 1 && b.shape()[1] == n)) {
        kind = detail::AddKind::row;
    } else if (b.shape().size() == 2 && b.shape()[0] == m && b.shape()[1] == 1) {
        kind = detail::AddKind::col;
    } else {
        detail::shape_error("add", a, b);
    }
    Tensor out(a.shape());
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    const long total = a.numel();
    switch (kind) {
        case detail::AddKind::same:
            for (long i = 0; i < total; ++i) { op[i] = ap[i] + bp[i]; }
            break;
        case detail::AddKind::row:
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) { op[static_cast<long>(i) * n + j] = ap[static_cast<long>(i) * n + j] + bp[j]; }
            }
            break;
        case detail::AddKind::col:
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) { op[static_cast<long>(i) * n + j] = ap[static_cast<long>(i) * n + j] + bp[i]; }
            }
            break;
    }
    if (detail::track({&a, &b})) {
        detail::attach(out, "add", {a, b}, [m, n, kind](const Tensor& o) {
            Tensor a = o.node->parents[0];
            Tensor b = o.node->parents[1];
            const double* g = o.grad().data();
            if (detail::needs(a)) {
                a.ensure_grad();
                double* ga = a.grad().data();
                const long total = a.numel();
                for (long i = 0; i < total; ++i) { ga[i] += g[i]; }
            }
            if (detail::needs(b)) {
                b.ensure_grad();
                double* gb = b.grad().data();
                switch (kind) {
                    case detail::AddKind::same: {
                        const long total = b.numel();
                        for (long i = 0; i < total; ++i) { gb[i] += g[i]; }
                        break;
                    }
                    case detail::AddKind::row:
                        for (int i = 0; i < m; ++i) {
                            for (int j = 0; j < n; ++j) { gb[j] += g[static_cast<long>(i) * n + j]; }
                        }
                        break;
                    case detail::AddKind::col:
                        for (int i = 0; i < m; ++i) {
                            for (int j = 0; j < n; ++j) { gb[i] += g[static_cast<long>(i) * n + j]; }
                        }
                        break;
                }
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* ap = a.ptr();
    double* op = out.ptr();
    const long total = a.numel();
    for (long i = 0; i < total; ++i) { op[i] = ap[i] * c; }
    if (detail::track({&a})) {
        detail::attach(out, "scale", {a}, [c](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            double* ga = a.grad().data();
            const long total = a.numel();
            for (long i = 0; i < total; ++i) { ga[i] += g[i] * c; }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) { detail::shape_error("multiply", a, b); }
    Tensor out(a.shape());
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    const long total = a.numel();
    for (long i = 0; i < total; ++i) { op[i] = ap[i] * bp[i]; }
    if (detail::track({&a, &b})) {
        detail::attach(out, "multiply", {a, b}, [](const Tensor& o) {
            Tensor a = o.node->parents[0];
            Tensor b = o.node->parents[1];
            const double* g = o.grad().data();
            const long total = a.numel();
            if (detail::needs(a)) {
                a.ensure_grad();
                double* ga = a.grad().data();
                const double* bp = b.ptr();
                for (long i = 0; i < total; ++i) { ga[i] += g[i] * bp[i]; }
            }
            if (detail::needs(b)) {
                b.ensure_grad();
                double* gb = b.grad().data();
                const double* ap = a.ptr();
                for (long i = 0; i < total; ++i) { gb[i] += g[i] * ap[i]; }
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    const double* ap = a.ptr();
    double* op = out.ptr();
    const long total = a.numel();
    for (long i = 0; i < total; ++i) { op[i] = ap[i] > 0.0 ? ap[i] : 0.0; }
    if (detail::track({&a})) {
        detail::attach(out, "relu", {a}, [](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            const double* ap = a.ptr();
            double* ga = a.grad().data();
            const long total = a.numel();
            for (long i = 0; i < total; ++i) {
                if (ap[i] > 0.0) { ga[i] += g[i]; }
            }
        });
    }
    return out;
}

// exact GELU: x * Phi(x)
inline Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    const double* ap = a.ptr();
    double* op = out.ptr();
    const long total = a.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (long i = 0; i < total; ++i) { op[i] = 0.5 * ap[i] * (1.0 + std::erf(ap[i] * inv_sqrt2)); }
    if (detail::track({&a})) {
        detail::attach(out, "gelu", {a}, [](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            const double* ap = a.ptr();
            double* ga = a.grad().data();
            const long total = a.numel();
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (long i = 0; i < total; ++i) {
                const double x = ap[i];
                const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] += g[i] * (phi + x * pdf);
            }
        });
    }
    return out;
}

namespace detail {
inline void softmax_row(const double* in, double* out, int n) {
    double mx = in[0];
    for (int j = 1; j < n; ++j) { mx = std::max(mx, in[j]); }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) { out[j] *= inv; }
}
} // namespace detail

// row-wise softmax over the last dimension of a 2-d tensor (1-d treated as one row)
inline Tensor softmax(const Tensor& a) {
    const int m = a.shape().size() == 2 ? a.shape()[0] : 1;
    const int n = a.shape().size() == 2 ? a.shape()[1] : a.shape()[0];
    Tensor out(a.shape());
    for (int i = 0; i < m; ++i) { detail::softmax_row(a.ptr() + static_cast<long>(i) * n, out.ptr() + static_cast<long>(i) * n, n); }
    if (detail::track({&a})) {
        detail::attach(out, "softmax", {a}, [m, n](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            const double* y = o.ptr();
            double* ga = a.grad().data();
            for (int i = 0; i < m; ++i) {
                const double* grow = g + static_cast<long>(i) * n;
                const double* yrow = y + static_cast<long>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) { dot += grow[j] * yrow[j]; }
                double* garow = ga + static_cast<long>(i) * n;
                for (int j = 0; j < n; ++j) { garow[j] += yrow[j] * (grow[j] - dot); }
            }
        });
    }
    return out;
}

// row-wise layer norm with learned gain/bias vectors of length n
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (a.shape().size() != 2) { detail::shape_error("layer_norm", a, "expected 2-d input"); }
    const int m = a.shape()[0], n = a.shape()[1];
    if (gain.numel() != n || bias.numel() != n) { detail::shape_error("layer_norm", a, gain); }
    Tensor out(a.shape());
    std::vector<double> inv_std(m), mean(m);
    const double* ap = a.ptr();
    const double* gp = gain.ptr();
    const double* bp = bias.ptr();
    double* op = out.ptr();
    for (int i = 0; i < m; ++i) {
        const double* row = ap + static_cast<long>(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) { mu += row[j]; }
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        double* orow = op + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) { orow[j] = (row[j] - mu) * is * gp[j] + bp[j]; }
    }
    if (detail::track({&a, &gain, &bias})) {
        detail::attach(out, "layer_norm", {a, gain, bias},
                       [m, n, mean = std::move(mean), inv_std = std::move(inv_std)](const Tensor& o) {
            Tensor a = o.node->parents[0];
            Tensor gain = o.node->parents[1];
            Tensor bias = o.node->parents[2];
            const double* g = o.grad().data();
            const double* ap = a.ptr();
            const double* gp = gain.ptr();
            const bool na = detail::needs(a);
            const bool ng = detail::needs(gain);
            const bool nb = detail::needs(bias);
            if (na) { a.ensure_grad(); }
            if (ng) { gain.ensure_grad(); }
            if (nb) { bias.ensure_grad(); }
            for (int i = 0; i < m; ++i) {
                const double* grow = g + static_cast<long>(i) * n;
                const double* arow = ap + static_cast<long>(i) * n;
                const double mu = mean[i];
                const double is = inv_std[i];
                if (ng || nb) {
                    double* ggain = ng ? gain.grad().data() : nullptr;
                    double* gbias = nb ? bias.grad().data() : nullptr;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (arow[j] - mu) * is;
                        if (ggain) { ggain[j] += grow[j] * xhat; }
                        if (gbias) { gbias[j] += grow[j]; }
                    }
                }
                if (na) {
                    // dxhat = g * gain; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (arow[j] - mu) * is;
                        const double dxh = grow[j] * gp[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat;
                    }
                    sum_dxhat /= n;
                    sum_dxhat_xhat /= n;
                    double* garow = a.grad().data() + static_cast<long>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (arow[j] - mu) * is;
                        const double dxh = grow[j] * gp[j];
                        garow[j] += is * (dxh - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// rows of `table` gathered by id; backward scatters into the table gradient
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) { detail::shape_error("embedding", table, "table must be 2-d"); }
    const int v = table.shape()[0], d = table.shape()[1];
    const int len = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= v) {
            fail(ErrorKind::numeric, "embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
        }
    }
    Tensor out({len, d});
    const double* tp = table.ptr();
    double* op = out.ptr();
    for (int i = 0; i < len; ++i) {
        std::memcpy(op + static_cast<long>(i) * d, tp + static_cast<long>(ids[i]) * d, sizeof(double) * d);
    }
    if (detail::track({&table})) {
        detail::attach(out, "embedding", {table}, [ids, d](const Tensor& o) {
            Tensor table = o.node->parents[0];
            if (!detail::needs(table)) { return; }
            table.ensure_grad();
            const double* g = o.grad().data();
            double* gt = table.grad().data();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = gt + static_cast<long>(ids[i]) * d;
                const double* src = g + static_cast<long>(i) * d;
                for (int j = 0; j < d; ++j) { dst[j] += src[j]; }
            }
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) { fail(ErrorKind::numeric, "concat: no inputs"); }
    const int n = parts[0].cols();
    int m = 0;
    bool needs_grad = false;
    for (const Tensor& p : parts) {
        if (p.cols() != n || p.shape().size() != 2) { detail::shape_error("concat", parts[0], p); }
        m += p.rows();
        needs_grad = needs_grad || detail::needs(p);
    }
    Tensor out({m, n});
    double* op = out.ptr();
    long row = 0;
    for (const Tensor& p : parts) {
        std::memcpy(op + row * n, p.ptr(), sizeof(double) * p.numel());
        row += p.rows();
    }
    if (grad_enabled() && needs_grad) {
        detail::attach(out, "concat", parts, [n](const Tensor& o) {
            const double* g = o.grad().data();
            long row = 0;
            for (Tensor p : o.node->parents) {
                if (detail::needs(p)) {
                    p.ensure_grad();
                    double* gp = p.grad().data();
                    const double* src = g + row * n;
                    const long total = p.numel();
                    for (long i = 0; i < total; ++i) { gp[i] += src[i]; }
                }
                row += p.rows();
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.shape().size() != 2 || r0 < 0 || r1 > a.rows() || r0 >= r1) {
        detail::shape_error("slice", a, "invalid row range [" + std::to_string(r0) + "," + std::to_string(r1) + ")");
    }
    const int n = a.cols();
    Tensor out({r1 - r0, n});
    std::memcpy(out.ptr(), a.ptr() + static_cast<long>(r0) * n, sizeof(double) * out.numel());
    if (detail::track({&a})) {
        detail::attach(out, "slice", {a}, [r0, n](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double* g = o.grad().data();
            double* ga = a.grad().data() + static_cast<long>(r0) * n;
            const long total = o.numel();
            for (long i = 0; i < total; ++i) { ga[i] += g[i]; }
        });
    }
    return out;
}

// Per-sample row append: cache holds t rows per sample, fresh holds one row
// per sample; output interleaves to (t+1) rows per sample. Used to extend a
// cached attention window by the row currently being recomputed.
inline Tensor interleave_rows(const Tensor& cache, const Tensor& fresh, int batch) {
    const int n = fresh.cols();
    if (fresh.rows() != batch || (cache.defined() && cache.cols() != n)) {
        detail::shape_error("interleave", fresh, "batch/col mismatch");
    }
    const int t = cache.defined() ? cache.rows() / batch : 0;
    if (cache.defined() && cache.rows() != t * batch) {
        detail::shape_error("interleave", cache, "cache rows not divisible by batch");
    }
    Tensor out({batch * (t + 1), n});
    double* op = out.ptr();
    const double* fp = fresh.ptr();
    const double* cp = cache.defined() ? cache.ptr() : nullptr;
    for (int b = 0; b < batch; ++b) {
        if (t > 0) {
            std::memcpy(op + static_cast<long>(b) * (t + 1) * n, cp + static_cast<long>(b) * t * n, sizeof(double) * t * n);
        }
        std::memcpy(op + (static_cast<long>(b) * (t + 1) + t) * n, fp + static_cast<long>(b) * n, sizeof(double) * n);
    }
    std::vector<Tensor> parents = cache.defined() ? std::vector<Tensor>{cache, fresh} : std::vector<Tensor>{fresh};
    bool needs_grad = false;
    for (const Tensor& p : parents) { needs_grad = needs_grad || detail::needs(p); }
    if (grad_enabled() && needs_grad) {
        detail::attach(out, "interleave", parents, [batch, t, n](const Tensor& o) {
            const double* g = o.grad().data();
            Tensor fresh = o.node->parents.back();
            if (detail::needs(fresh)) {
                fresh.ensure_grad();
                double* gf = fresh.grad().data();
                for (int b = 0; b < batch; ++b) {
                    const double* src = g + (static_cast<long>(b) * (t + 1) + t) * n;
                    double* dst = gf + static_cast<long>(b) * n;
                    for (int j = 0; j < n; ++j) { dst[j] += src[j]; }
                }
            }
            if (o.node->parents.size() == 2) {
                Tensor cache = o.node->parents[0];
                if (detail::needs(cache)) {
                    cache.ensure_grad();
                    double* gc = cache.grad().data();
                    for (int b = 0; b < batch; ++b) {
                        const double* src = g + static_cast<long>(b) * (t + 1) * n;
                        double* dst = gc + static_cast<long>(b) * t * n;
                        for (long i = 0; i < static_cast<long>(t) * n; ++i) { dst[i] += src[i]; }
                    }
                }
            }
        });
    }
    return out;
}

// Per-sample row gather: x holds `rows` rows per sample; returns the row at
// `position` of every sample as a [batch, d] matrix.
inline Tensor gather_rows(const Tensor& x, int batch, int rows, int position) {
    const int n = x.cols();
    if (x.rows() != batch * rows || position < 0 || position >= rows) {
        detail::shape_error("gather_rows", x, "bad batch/rows/position");
    }
    Tensor out({batch, n});
    double* op = out.ptr();
    const double* xp = x.ptr();
    for (int b = 0; b < batch; ++b) {
        std::memcpy(op + static_cast<long>(b) * n, xp + (static_cast<long>(b) * rows + position) * n,
                    sizeof(double) * n);
    }
    if (detail::track({&x})) {
        detail::attach(out, "gather_rows", {x}, [batch, rows, position, n](const Tensor& o) {
            Tensor x = o.node->parents[0];
            if (!detail::needs(x)) { return; }
            x.ensure_grad();
            const double* g = o.grad().data();
            double* gx = x.grad().data();
            for (int b = 0; b < batch; ++b) {
                double* dst = gx + (static_cast<long>(b) * rows + position) * n;
                const double* src = g + static_cast<long>(b) * n;
                for (int j = 0; j < n; ++j) { dst[j] += src[j]; }
            }
        });
    }
    return out;
}

// Per-sample row replacement: overwrites the row at `position` of every
// sample with `value` ([d] shared across the batch, or [batch, d]).
inline Tensor override_rows(const Tensor& x, const Tensor& value, int batch, int rows, int position) {
    const int n = x.cols();
    if (x.rows() != batch * rows || position < 0 || position >= rows) {
        detail::shape_error("override_rows", x, "bad batch/rows/position");
    }
    const bool per_sample = value.shape().size() == 2 && value.rows() == batch && value.cols() == n;
    const bool shared = value.numel() == n && !per_sample;
    if (!per_sample && !shared) { detail::shape_error("override_rows", x, value); }
    Tensor out(x.shape());
    std::memcpy(out.ptr(), x.ptr(), sizeof(double) * x.numel());
    double* op = out.ptr();
    const double* vp = value.ptr();
    for (int b = 0; b < batch; ++b) {
        const double* src = per_sample ? vp + static_cast<long>(b) * n : vp;
        std::memcpy(op + (static_cast<long>(b) * rows + position) * n, src, sizeof(double) * n);
    }
    if (detail::track({&x, &value})) {
        detail::attach(out, "override_rows", {x, value},
                       [batch, rows, position, n, per_sample](const Tensor& o) {
            Tensor x = o.node->parents[0];
            Tensor value = o.node->parents[1];
            const double* g = o.grad().data();
            if (detail::needs(x)) {
                x.ensure_grad();
                double* gx = x.grad().data();
                for (int r = 0; r < batch * rows; ++r) {
                    if (r % rows == position) { continue; } // replaced rows get no grad
                    const double* src = g + static_cast<long>(r) * n;
                    double* dst = gx + static_cast<long>(r) * n;
                    for (int j = 0; j < n; ++j) { dst[j] += src[j]; }
                }
            }
            if (detail::needs(value)) {
                value.ensure_grad();
                double* gv = value.grad().data();
                for (int b = 0; b < batch; ++b) {
                    const double* src = g + (static_cast<long>(b) * rows + position) * n;
                    double* dst = per_sample ? gv + static_cast<long>(b) * n : gv;
                    for (int j = 0; j < n; ++j) { dst[j] += src[j]; }
                }
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    Tensor out({1});
    double acc = 0.0;
    const double* ap = a.ptr();
    const long total = a.numel();
    for (long i = 0; i < total; ++i) { acc += ap[i]; }
    out.ptr()[0] = acc;
    if (detail::track({&a})) {
        detail::attach(out, "sum", {a}, [](const Tensor& o) {
            Tensor a = o.node->parents[0];
            if (!detail::needs(a)) { return; }
            a.ensure_grad();
            const double g = o.grad()[0];
            double* ga = a.grad().data();
            const long total = a.numel();
            for (long i = 0; i < total; ++i) { ga[i] += g; }
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    const long total = a.numel();
    return scale(sum(a), 1.0 / static_cast<double>(total));
}

// per-row loss: -sum_v target[v] * log softmax(logits)[v]; targets are
// distributions (not necessarily one-hot) and are treated as constants
inline Tensor cross_entropy_rows(const Tensor& logits, const Tensor& target) {
    if (logits.shape() != target.shape() || logits.shape().size() != 2) {
        detail::shape_error("cross_entropy", logits, target);
    }
    const int m = logits.shape()[0], n = logits.shape()[1];
    Tensor out({m});
    std::vector<double> probs(static_cast<size_t>(m) * n);
    const double* lp = logits.ptr();
    const double* tp = target.ptr();
    double* op = out.ptr();
    for (int i = 0; i < m; ++i) {
        const double* lrow = lp + static_cast<long>(i) * n;
        double* prow = probs.data() + static_cast<long>(i) * n;
        detail::softmax_row(lrow, prow, n);
        double mx = lrow[0];
        for (int j = 1; j < n; ++j) { mx = std::max(mx, lrow[j]); }
        double lse = 0.0;
        for (int j = 0; j < n; ++j) { lse += std::exp(lrow[j] - mx); }
        lse = std::log(lse) + mx;
        const double* trow = tp + static_cast<long>(i) * n;
        double loss = 0.0;
        for (int j = 0; j < n; ++j) {
            if (trow[j] != 0.0) { loss += trow[j] * (lse - lrow[j]); }
        }
        op[i] = loss;
    }
    if (detail::track({&logits})) {
        detail::attach(out, "cross_entropy", {logits, target},
                       [m, n, probs = std::move(probs)](const Tensor& o) {
            Tensor logits = o.node->parents[0];
            Tensor target = o.node->parents[1];
            if (!detail::needs(logits)) { return; }
            logits.ensure_grad();
            const double* g = o.grad().data();
            const double* tp = target.ptr();
            double* gl = logits.grad().data();
            for (int i = 0; i < m; ++i) {
                const double gi = g[i];
                if (gi == 0.0) { continue; }
                const double* prow = probs.data() + static_cast<long>(i) * n;
                const double* trow = tp + static_cast<long>(i) * n;
                double* grow = gl + static_cast<long>(i) * n;
                for (int j = 0; j < n; ++j) { grow[j] += gi * (prow[j] - trow[j]); }
            }
        });
    }
    return out;
}

// Multi-head scaled dot-product attention over `batch` independent samples.
// q: [batch*lq, d], k/v: [batch*lk, d]; heads split d contiguously.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int lq, int lk,
                        int n_heads, bool causal) {
    const int d = q.cols();
    if (q.rows() != batch * lq || k.rows() != batch * lk || v.rows() != batch * lk || k.cols() != d ||
        v.cols() != d || d % n_heads != 0) {
        detail::shape_error("attention", q, k);
    }
    if (causal && lq != lk) { detail::shape_error("attention", q, "causal requires lq == lk"); }
    const int dh = d / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out({batch * lq, d});
    // probs stored for backward: [batch][head][lq][lk]
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(batch) * n_heads * lq * lk);
    const double* qp = q.ptr();
    const double* kp = k.ptr();
    const double* vp = v.ptr();
    double* op = out.ptr();
    double* pp = probs->data();
    const double attn_cost = 4.0 * batch * n_heads * lq * lk * dh;
    parallel_for(batch, [&](long b) {
        std::vector<double> scores(lk);
        for (int h = 0; h < n_heads; ++h) {
            for (int i = 0; i < lq; ++i) {
                const double* qrow = qp + (static_cast<long>(b) * lq + i) * d + h * dh;
                const int kmax = causal ? i + 1 : lk;
                for (int j = 0; j < kmax; ++j) {
                    const double* krow = kp + (static_cast<long>(b) * lk + j) * d + h * dh;
                    double acc = 0.0;
                    for (int p = 0; p < dh; ++p) { acc += qrow[p] * krow[p]; }
                    scores[j] = acc * sc;
                }
                double* prow = pp + ((static_cast<long>(b) * n_heads + h) * lq + i) * lk;
                detail::softmax_row(scores.data(), prow, kmax);
                for (int j = kmax; j < lk; ++j) { prow[j] = 0.0; }
                double* orow = op + (static_cast<long>(b) * lq + i) * d + h * dh;
                std::fill(orow, orow + dh, 0.0);
                for (int j = 0; j < kmax; ++j) {
                    const double pj = prow[j];
                    if (pj == 0.0) { continue; }
                    const double* vrow = vp + (static_cast<long>(b) * lk + j) * d + h * dh;
                    for (int p = 0; p < dh; ++p) { orow[p] += pj * vrow[p]; }
                }
            }
        }
    }, attn_cost);
    if (detail::track({&q, &k, &v})) {
        detail::attach(out, "attention", {q, k, v},
                       [batch, lq, lk, n_heads, dh, d, sc, causal, probs](const Tensor& o) {
            Tensor q = o.node->parents[0];
            Tensor k = o.node->parents[1];
            Tensor v = o.node->parents[2];
            const bool nq = detail::needs(q), nk = detail::needs(k), nv = detail::needs(v);
            if (nq) { q.ensure_grad(); }
            if (nk) { k.ensure_grad(); }
            if (nv) { v.ensure_grad(); }
            const double* g = o.grad().data();
            const double* qp = q.ptr();
            const double* kp = k.ptr();
            const double* vp = v.ptr();
            const double* pp = probs->data();
            double* gq = nq ? q.grad().data() : nullptr;
            double* gk = nk ? k.grad().data() : nullptr;
            double* gv = nv ? v.grad().data() : nullptr;
            // per-sample accumulation; samples touch disjoint grad rows
            parallel_for(batch, [&](long b) {

                std::vector<double> dp(lk);
                for (int h = 0; h < n_heads; ++h) {
                    for (int i = 0; i < lq; ++i) {
                        const int kmax = causal ? i + 1 : lk;
                        const double* grow = g + (static_cast<long>(b) * lq + i) * d + h * dh;
                        const double* prow = pp + ((static_cast<long>(b) * n_heads + h) * lq + i) * lk;
                        // dP = dO . V^T ; dV += P^T dO
                        double dot = 0.0;
                        for (int j = 0; j < kmax; ++j) {
                            const double* vrow = vp + (static_cast<long>(b) * lk + j) * d + h * dh;
                            double acc = 0.0;
                            for (int p = 0; p < dh; ++p) { acc += grow[p] * vrow[p]; }
                            dp[j] = acc;
                            dot += acc * prow[j];
                            if (gv) {
                                double* gvrow = gv + (static_cast<long>(b) * lk + j) * d + h * dh;
                                for (int p = 0; p < dh; ++p) { gvrow[p] += prow[j] * grow[p]; }
                            }
                        }
                        // dS = P * (dP - dot); dQ += dS K sc ; dK += dS^T Q sc
                        const double* qrow = qp + (static_cast<long>(b) * lq + i) * d + h * dh;
                        double* gqrow = gq ? gq + (static_cast<long>(b) * lq + i) * d + h * dh : nullptr;
                        for (int j = 0; j < kmax; ++j) {
                            const double ds = prow[j] * (dp[j] - dot) * sc;
                            if (ds == 0.0) { continue; }
                            const double* krow = kp + (static_cast<long>(b) * lk + j) * d + h * dh;
                            if (gqrow) {
                                for (int p = 0; p < dh; ++p) { gqrow[p] += ds * krow[p]; }
                            }
                            if (gk) {
                                double* gkrow = gk + (static_cast<long>(b) * lk + j) * d + h * dh;
                                for (int p = 0; p < dh; ++p) { gkrow[p] += ds * qrow[p]; }
                            }
                        }
                    }
                }
            }, 8.0 * batch * n_heads * lq * lk * dh);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients accumulate into the .grad
// buffers of every gradient-bearing tensor reachable from the loss.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        fail(ErrorKind::numeric, "backward: loss must be scalar, got " + Tensor::shape_str(loss.shape()));
    }
    if (!loss.node) { return; }
    // topological order by iterative DFS over Node pointers
    std::unordered_set<Node*> seen;
    struct Frame {
        const Tensor* t;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({&loss, 0});
    seen.insert(loss.node.get());
    std::vector<const Tensor*> topo;
    while (!stack.empty()) {
        Frame& f = stack.back();
        Node* node = f.t->node.get();
        if (f.next_parent < node->parents.size()) {
            const Tensor& p = node->parents[f.next_parent++];
            if (p.node && seen.insert(p.node.get()).second) { stack.push_back({&p, 0}); }
        } else {
            topo.push_back(f.t);
            stack.pop_back();
        }
    }
    // seed and sweep in reverse topological order
    const_cast<Tensor&>(loss).grad()[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const Tensor& t = **it;
        if (!t.has_grad()) { const_cast<Tensor&>(t).ensure_grad(); }
        t.node->backward(t);
    }
}

} // namespace gred::numerics
