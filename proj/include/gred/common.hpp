// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gred {

// Error categories map to CLI exit codes.
enum class ErrorKind {
    config   = 2,
    artifact = 3,
    numeric  = 4,
    io       = 5,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

// splitmix64: seed derivation for independent sub-streams.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derive a named sub-seed from a master seed. Stable across platforms.
inline uint64_t sub_seed(uint64_t master, const std::string& tag) {
    uint64_t h = 1469598103934665603ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return splitmix64(master ^ h);
}

namespace detail {

// Persistent pool for parallel_for. Work is partitioned into fixed contiguous
// chunks per worker, so results do not depend on scheduling order.
class ThreadPool {
  public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return n_threads_; }

    // fn(worker_index) is run on workers 0..n-1; worker 0 runs on the caller.
    void run(int n, const std::function<void(int)>& fn) {
        if (n <= 1) {
            fn(0);
            return;
        }
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_ = &fn;
            job_n_ = n;
            done_ = 0;
            ++epoch_;
        }
        cv_.notify_all();
        fn(0);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return done_ == job_n_ - 1; });
        job_ = nullptr;
    }

  private:
    ThreadPool() {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("GRED_THREADS")) {
            n = std::atoi(env);
        }
        n_threads_ = n < 1 ? 1 : n;
        for (int i = 1; i < n_threads_; ++i) {
            workers_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
            ++epoch_;
        }
        cv_.notify_all();
        for (auto& t : workers_) { t.join(); }
    }

    void worker_loop(int idx) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* job = nullptr;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return epoch_ != seen; });
                seen = epoch_;
                if (stop_) { return; }
                if (idx >= job_n_) {
                    // this worker has no share of the current job
                    continue;
                }
                job = job_;
            }
            if (job) {
                (*job)(idx);
                std::unique_lock<std::mutex> lk(mu_);
                ++done_;
                if (done_ == job_n_ - 1) { done_cv_.notify_one(); }
            }
        }
    }

    int n_threads_ = 1;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    int job_n_ = 0;
    int done_ = 0;
    uint64_t epoch_ = 0;
    bool stop_ = false;
};

} // namespace detail

inline int thread_count() { return detail::ThreadPool::instance().size(); }

namespace detail {
inline bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
}
} // namespace detail

// Runs fn(i) for i in [0, n). Iterations are split into contiguous ranges,
// one per worker; within a range execution is sequential, so any output
// indexed by i is bit-identical regardless of thread count. Nested calls
// degrade to sequential execution. total_cost is a rough flop estimate used
// to skip pool dispatch when the work would not amortize it.
inline void parallel_for(long n, const std::function<void(long)>& fn, double total_cost = 1e18) {
    if (n <= 0) { return; }
    int workers = thread_count();
    if (workers <= 1 || n < 2 || total_cost < 4e5 || detail::in_parallel_region()) {
        for (long i = 0; i < n; ++i) { fn(i); }
        return;
    }
    if (static_cast<long>(workers) > n) { workers = static_cast<int>(n); }
    const long chunk = (n + workers - 1) / workers;
    detail::ThreadPool::instance().run(workers, [&](int w) {
        detail::in_parallel_region() = true;
        const long lo = w * chunk;
        const long hi = std::min(n, lo + chunk);
        for (long i = lo; i < hi; ++i) { fn(i); }
        detail::in_parallel_region() = false;
    });
}

} // namespace gred
