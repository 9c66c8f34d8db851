// Copyright (C) 2026 gred Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gred/common.hpp"

namespace gred::docid {

using json = nlohmann::json;

// Fixed-length code sequence plus a disambiguator token that makes the full
// identifier unique. Hand-built identifiers (tests, tooling) may omit the
// disambiguator; assignment always sets one.
struct DocId {
    std::vector<int> codes;
    std::optional<int> disamb;

    int token_count() const { return static_cast<int>(codes.size()) + (disamb ? 1 : 0); }

    bool operator==(const DocId& o) const { return codes == o.codes && disamb == o.disamb; }
    bool operator<(const DocId& o) const {
        if (codes != o.codes) { return codes < o.codes; }
        return disamb.value_or(-1) < o.disamb.value_or(-1);
    }
};

enum class Scheme { hkmeans, rq, pq };

inline std::string scheme_name(Scheme s) {
    switch (s) {
        case Scheme::hkmeans: return "hkmeans";
        case Scheme::rq: return "rq";
        case Scheme::pq: return "pq";
    }
    return "?";
}

inline Scheme scheme_from(const std::string& s) {
    if (s == "hkmeans") { return Scheme::hkmeans; }
    if (s == "rq") { return Scheme::rq; }
    if (s == "pq") { return Scheme::pq; }
    fail(ErrorKind::config, "unknown docid scheme: " + s);
}

// Centroid storage for all three schemes.
//  - rq: levels[t] holds K centroids of full dimension (residual stages)
//  - pq: levels[t] holds K centroids of the t-th subspace
//  - hkmeans: nodes[prefix-path] holds the centroids of that tree node
struct Codebooks {
    Scheme scheme = Scheme::rq;
    int K = 0;
    int T = 0;
    int dim = 0;        // embedding dimension
    int sub_dim = 0;    // pq subspace width (0 otherwise)
    std::vector<std::vector<std::vector<double>>> levels; // [level][centroid][component]
    std::map<std::vector<int>, std::vector<std::vector<double>>> nodes; // hkmeans tree
    std::map<std::vector<int>, int> disamb_counts; // codes -> next free disambiguator
};

// ---------------------------------------------------------------------------
// k-means (k-means++ init, fixed iteration count, farthest-point reseeding)
// ---------------------------------------------------------------------------

namespace detail {

inline double sq_dist(const double* a, const double* b, int d) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

struct KmeansResult {
    std::vector<std::vector<double>> centroids;
    std::vector<int> assign;
};

inline KmeansResult kmeans(const std::vector<std::vector<double>>& points, int k, int iters,
                           std::mt19937_64& rng) {
    const int n = static_cast<int>(points.size());
    if (n == 0) { fail(ErrorKind::config, "kmeans: empty point set"); }
    const int d = static_cast<int>(points[0].size());
    k = std::min(k, n);

    // k-means++ seeding
    std::vector<std::vector<double>> cents;
    std::uniform_int_distribution<int> first(0, n - 1);
    cents.push_back(points[first(rng)]);
    std::vector<double> best_d2(n, std::numeric_limits<double>::max());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (static_cast<int>(cents.size()) < k) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            best_d2[i] = std::min(best_d2[i], sq_dist(points[i].data(), cents.back().data(), d));
            total += best_d2[i];
        }
        if (total <= 0.0) {
            // all points coincide with existing centroids
            cents.push_back(points[first(rng)]);
            continue;
        }
        double target = unit(rng) * total;
        int chosen = n - 1;
        for (int i = 0; i < n; ++i) {
            target -= best_d2[i];
            if (target <= 0.0) {
                chosen = i;
                break;
            }
        }
        cents.push_back(points[chosen]);
    }

    std::vector<int> assign(n, 0);
    std::vector<int> prev_assign(n, -1);
    for (int it = 0; it < iters; ++it) {
        parallel_for(n, [&](long i) {
            double best = std::numeric_limits<double>::max();
            int arg = 0;
            for (int c = 0; c < static_cast<int>(cents.size()); ++c) {
                const double d2 = sq_dist(points[i].data(), cents[c].data(), d);
                if (d2 < best) {
                    best = d2;
                    arg = c;
                }
            }
            assign[i] = arg;
        });
        bool changed = assign != prev_assign;
        prev_assign = assign;
        std::vector<std::vector<double>> sums(cents.size(), std::vector<double>(d, 0.0));
        std::vector<int> counts(cents.size(), 0);
        for (int i = 0; i < n; ++i) {
            counts[assign[i]] += 1;
            for (int j = 0; j < d; ++j) { sums[assign[i]][j] += points[i][j]; }
        }
        for (size_t c = 0; c < cents.size(); ++c) {
            if (counts[c] == 0) {
                // reseed an empty cluster from the farthest point
                double far_d = -1.0;
                int far_i = 0;
                for (int i = 0; i < n; ++i) {
                    const double d2 = sq_dist(points[i].data(), cents[assign[i]].data(), d);
                    if (d2 > far_d) {
                        far_d = d2;
                        far_i = i;
                    }
                }
                cents[c] = points[far_i];
                changed = true;
            } else {
                for (int j = 0; j < d; ++j) { cents[c][j] = sums[c][j] / counts[c]; }
            }
        }
        if (!changed && it > 0) { break; }
    }
    // final assignment against the final centroids
    parallel_for(n, [&](long i) {
        double best = std::numeric_limits<double>::max();
        for (int c = 0; c < static_cast<int>(cents.size()); ++c) {
            const double d2 = sq_dist(points[i].data(), cents[c].data(), d);
            if (d2 < best) {
                best = d2;
                assign[i] = c;
            }
        }
    });
    return {std::move(cents), std::move(assign)};
}

inline int nearest(const std::vector<std::vector<double>>& cents, const double* p, int d) {
    double best = std::numeric_limits<double>::max();
    int arg = 0;
    for (int c = 0; c < static_cast<int>(cents.size()); ++c) {
        const double d2 = sq_dist(p, cents[c].data(), d);
        if (d2 < best) {
            best = d2;
            arg = c;
        }
    }
    return arg;
}

// Appends disambiguators in input order: first holder of a code word gets 0.
inline void disambiguate(std::vector<DocId>& ids, std::map<std::vector<int>, int>& counts) {
    for (DocId& id : ids) {
        int& c = counts[id.codes];
        id.disamb = c;
        c += 1;
    }
}

} // namespace detail

struct AssignConfig {
    int K = 10;
    int T = 3;
    int kmeans_iters = 25;
};

struct Assignment {
    std::vector<DocId> ids; // parallel to the input embedding order
    Codebooks books;
};

// Recursive k-means: the code at level t is the cluster index within the
// level-(t-1) node. Nodes with a single point stop splitting (code 0 below).
inline Assignment hkmeans_assign(const std::vector<std::vector<double>>& embeddings,
                                 const AssignConfig& cfg, uint64_t seed) {
    if (embeddings.empty()) { fail(ErrorKind::config, "hkmeans_assign: empty embedding set"); }
    if (cfg.K < 2) { fail(ErrorKind::config, "hkmeans_assign: K must be >= 2"); }
    Assignment out;
    out.books.scheme = Scheme::hkmeans;
    out.books.K = cfg.K;
    out.books.T = cfg.T;
    out.books.dim = static_cast<int>(embeddings[0].size());
    const int n = static_cast<int>(embeddings.size());
    out.ids.assign(n, DocId{});
    for (DocId& id : out.ids) { id.codes.assign(cfg.T, 0); }

    // breadth-first split; deterministic node order (sorted prefix keys)
    std::map<std::vector<int>, std::vector<int>> frontier; // prefix -> member indexes
    frontier[{}] = std::vector<int>(n);
    std::iota(frontier[{}].begin(), frontier[{}].end(), 0);
    for (int level = 0; level < cfg.T; ++level) {
        std::map<std::vector<int>, std::vector<int>> next;
        for (auto& [prefix, members] : frontier) {
            if (members.size() <= 1) {
                // too small to split: codes stay 0 at this and deeper levels
                continue;
            }
            std::vector<std::vector<double>> pts;
            pts.reserve(members.size());
            for (int i : members) { pts.push_back(embeddings[i]); }
            std::mt19937_64 rng(sub_seed(seed, "hkm" + std::to_string(level) + json(prefix).dump()));
            auto res = detail::kmeans(pts, cfg.K, cfg.kmeans_iters, rng);
            out.books.nodes[prefix] = res.centroids;
            for (size_t mi = 0; mi < members.size(); ++mi) {
                out.ids[members[mi]].codes[level] = res.assign[mi];
                std::vector<int> child = prefix;
                child.push_back(res.assign[mi]);
                next[child].push_back(members[mi]);
            }
        }
        frontier = std::move(next);
    }
    detail::disambiguate(out.ids, out.books.disamb_counts);
    return out;
}

// Residual quantization: the level-t codebook is trained on residuals after
// subtracting the centroids chosen at levels < t.
inline Assignment rq_assign(const std::vector<std::vector<double>>& embeddings, const AssignConfig& cfg,
                            uint64_t seed) {
    if (embeddings.empty()) { fail(ErrorKind::config, "rq_assign: empty embedding set"); }
    if (cfg.K < 2) { fail(ErrorKind::config, "rq_assign: K must be >= 2"); }
    const int n = static_cast<int>(embeddings.size());
    const int d = static_cast<int>(embeddings[0].size());
    Assignment out;
    out.books.scheme = Scheme::rq;
    out.books.K = cfg.K;
    out.books.T = cfg.T;
    out.books.dim = d;
    out.ids.assign(n, DocId{});
    std::vector<std::vector<double>> residual = embeddings;
    for (int level = 0; level < cfg.T; ++level) {
        std::mt19937_64 rng(sub_seed(seed, "rq" + std::to_string(level)));
        auto res = detail::kmeans(residual, cfg.K, cfg.kmeans_iters, rng);
        out.books.levels.push_back(res.centroids);
        for (int i = 0; i < n; ++i) {
            out.ids[i].codes.push_back(res.assign[i]);
            const auto& c = res.centroids[res.assign[i]];
            for (int j = 0; j < d; ++j) { residual[i][j] -= c[j]; }
        }
    }
    detail::disambiguate(out.ids, out.books.disamb_counts);
    return out;
}

// Product quantization over T contiguous subspaces (zero-padded when the
// dimension is not divisible by T).
inline Assignment pq_assign(const std::vector<std::vector<double>>& embeddings, const AssignConfig& cfg,
                            uint64_t seed) {
    if (embeddings.empty()) { fail(ErrorKind::config, "pq_assign: empty embedding set"); }
    if (cfg.K < 2) { fail(ErrorKind::config, "pq_assign: K must be >= 2"); }
    const int n = static_cast<int>(embeddings.size());
    const int d = static_cast<int>(embeddings[0].size());
    const int sub = (d + cfg.T - 1) / cfg.T;
    Assignment out;
    out.books.scheme = Scheme::pq;
    out.books.K = cfg.K;
    out.books.T = cfg.T;
    out.books.dim = d;
    out.books.sub_dim = sub;
    out.ids.assign(n, DocId{});
    for (int level = 0; level < cfg.T; ++level) {
        std::vector<std::vector<double>> pts(n, std::vector<double>(sub, 0.0));
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < sub; ++j) {
                const int src = level * sub + j;
                if (src < d) { pts[i][j] = embeddings[i][src]; }
            }
        }
        std::mt19937_64 rng(sub_seed(seed, "pq" + std::to_string(level)));
        auto res = detail::kmeans(pts, cfg.K, cfg.kmeans_iters, rng);
        out.books.levels.push_back(res.centroids);
        for (int i = 0; i < n; ++i) { out.ids[i].codes.push_back(res.assign[i]); }
    }
    detail::disambiguate(out.ids, out.books.disamb_counts);
    return out;
}

// Nearest-centroid assignment with frozen codebooks; disambiguators continue
// from the training-time counters so uniqueness holds across both sets.
inline std::vector<DocId> assign_new_docs(const std::vector<std::vector<double>>& embeddings,
                                          Codebooks& books) {
    std::vector<DocId> ids(embeddings.size());
    const int d = books.dim;
    for (size_t i = 0; i < embeddings.size(); ++i) {
        const std::vector<double>& e = embeddings[i];
        std::vector<int>& codes = ids[i].codes;
        switch (books.scheme) {
            case Scheme::hkmeans: {
                std::vector<int> prefix;
                for (int level = 0; level < books.T; ++level) {
                    auto it = books.nodes.find(prefix);
                    if (it == books.nodes.end()) {
                        codes.push_back(0); // unsplit node: code 0 at deeper levels
                        prefix.push_back(0);
                    } else {
                        const int c = detail::nearest(it->second, e.data(), d);
                        codes.push_back(c);
                        prefix.push_back(c);
                    }
                }
                break;
            }
            case Scheme::rq: {
                std::vector<double> r = e;
                for (int level = 0; level < books.T; ++level) {
                    const int c = detail::nearest(books.levels[level], r.data(), d);
                    codes.push_back(c);
                    for (int j = 0; j < d; ++j) { r[j] -= books.levels[level][c][j]; }
                }
                break;
            }
            case Scheme::pq: {
                const int sub = books.sub_dim;
                std::vector<double> block(sub);
                for (int level = 0; level < books.T; ++level) {
                    for (int j = 0; j < sub; ++j) {
                        const int src = level * sub + j;
                        block[j] = src < d ? e[src] : 0.0;
                    }
                    codes.push_back(detail::nearest(books.levels[level], block.data(), sub));
                }
                break;
            }
        }
    }
    detail::disambiguate(ids, books.disamb_counts);
    return ids;
}

// RQ/PQ reconstruction error (mean squared) at the assigned codes; used by
// the monotonicity property.
inline double rq_reconstruction_error(const std::vector<std::vector<double>>& embeddings,
                                      const Assignment& a) {
    const int d = static_cast<int>(embeddings[0].size());
    double total = 0.0;
    for (size_t i = 0; i < embeddings.size(); ++i) {
        std::vector<double> rec(d, 0.0);
        for (size_t level = 0; level < a.books.levels.size(); ++level) {
            const auto& c = a.books.levels[level][a.ids[i].codes[level]];
            for (int j = 0; j < d; ++j) { rec[j] += c[j]; }
        }
        total += detail::sq_dist(rec.data(), embeddings[i].data(), d);
    }
    return total / static_cast<double>(embeddings.size());
}

// ---------------------------------------------------------------------------
// decoder vocabulary layout and trie
// ---------------------------------------------------------------------------

// Position-blocked docID vocabulary: [bos][eos][T blocks of K][disamb block].
struct DocIdVocab {
    int K = 0;
    int T = 0;
    int disamb_size = 1;

    int bos() const { return 0; }
    int eos() const { return 1; }
    int code_token(int level, int code) const { return 2 + level * K + code; }
    int disamb_token(int d) const { return 2 + T * K + d; }
    int size() const { return 2 + T * K + disamb_size; }
    int seq_len() const { return T + 1; } // codes plus disambiguator

    // [begin, end) of valid tokens for target position pos
    std::pair<int, int> segment(int pos) const {
        if (pos < T) { return {2 + pos * K, 2 + (pos + 1) * K}; }
        return {2 + T * K, 2 + T * K + disamb_size};
    }
    int segment_size(int pos) const {
        auto [b, e] = segment(pos);
        return e - b;
    }

    std::vector<int> tokens_of(const DocId& id) const {
        std::vector<int> out;
        out.reserve(id.token_count());
        for (size_t t = 0; t < id.codes.size(); ++t) { out.push_back(code_token(static_cast<int>(t), id.codes[t])); }
        if (id.disamb) {
            if (*id.disamb >= disamb_size) {
                fail(ErrorKind::config, "docid vocab: disambiguator " + std::to_string(*id.disamb) +
                                            " exceeds configured block size " + std::to_string(disamb_size));
            }
            out.push_back(disamb_token(*id.disamb));
        }
        return out;
    }
};

// Prefix tree over docID token sequences; leaves carry doc_keys.
class DocIdTrie {
  public:
    DocIdTrie() { nodes_.push_back({}); }

    void insert(const std::vector<int>& tokens, long doc_key) {
        int cur = 0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            auto it = nodes_[cur].children.find(tokens[i]);
            if (it == nodes_[cur].children.end()) {
                nodes_.push_back({});
                nodes_[cur].children[tokens[i]] = static_cast<int>(nodes_.size()) - 1;
                cur = static_cast<int>(nodes_.size()) - 1;
            } else {
                cur = it->second;
            }
        }
        if (nodes_[cur].doc_key != -1) {
            fail(ErrorKind::config, "trie: duplicate leaf for doc_key " + std::to_string(doc_key));
        }
        if (!nodes_[cur].children.empty()) {
            fail(ErrorKind::config, "trie: leaf would shadow an internal node");
        }
        nodes_[cur].doc_key = doc_key;
        ++size_;
    }

    // token ids that may extend the given prefix
    std::vector<int> valid_next(const std::vector<int>& prefix) const {
        const int node = walk(prefix);
        std::vector<int> out;
        if (node < 0) { return out; }
        out.reserve(nodes_[node].children.size());
        for (const auto& [tok, child] : nodes_[node].children) { out.push_back(tok); }
        return out;
    }

    bool contains(const std::vector<int>& tokens) const {
        const int node = walk(tokens);
        return node >= 0 && nodes_[node].doc_key != -1;
    }

    long leaf_key(const std::vector<int>& tokens) const {
        const int node = walk(tokens);
        return node >= 0 ? nodes_[node].doc_key : -1;
    }

    long size() const { return size_; }
    bool empty() const { return size_ == 0; }

    // all (token sequence, doc_key) leaves, lexicographic order
    std::vector<std::pair<std::vector<int>, long>> leaves() const {
        std::vector<std::pair<std::vector<int>, long>> out;
        std::vector<int> path;
        collect(0, path, out);
        return out;
    }

  private:
    struct TrieNode {
        std::map<int, int> children; // ordered: lexicographic iteration
        long doc_key = -1;
    };

    int walk(const std::vector<int>& tokens) const {
        int cur = 0;
        for (int t : tokens) {
            auto it = nodes_[cur].children.find(t);
            if (it == nodes_[cur].children.end()) { return -1; }
            cur = it->second;
        }
        return cur;
    }

    void collect(int node, std::vector<int>& path,
                 std::vector<std::pair<std::vector<int>, long>>& out) const {
        if (nodes_[node].doc_key != -1) { out.emplace_back(path, nodes_[node].doc_key); }
        for (const auto& [tok, child] : nodes_[node].children) {
            path.push_back(tok);
            collect(child, path, out);
            path.pop_back();
        }
    }

    std::vector<TrieNode> nodes_;
    long size_ = 0;
};

inline DocIdTrie build_trie(const std::vector<std::pair<std::vector<int>, long>>& entries) {
    DocIdTrie trie;
    for (const auto& [tokens, key] : entries) { trie.insert(tokens, key); }
    return trie;
}

inline void extend_trie(DocIdTrie& trie, const std::vector<std::pair<std::vector<int>, long>>& entries) {
    for (const auto& [tokens, key] : entries) { trie.insert(tokens, key); }
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline json codebooks_to_json(const Codebooks& b) {
    json j{{"scheme", scheme_name(b.scheme)}, {"K", b.K},       {"T", b.T},
           {"dim", b.dim},                    {"sub_dim", b.sub_dim}};
    if (b.scheme == Scheme::hkmeans) {
        json nodes = json::array();
        for (const auto& [prefix, cents] : b.nodes) {
            nodes.push_back(json{{"prefix", prefix}, {"centroids", cents}});
        }
        j["nodes"] = std::move(nodes);
    } else {
        j["levels"] = b.levels;
    }
    json counts = json::array();
    for (const auto& [codes, c] : b.disamb_counts) { counts.push_back(json{{"codes", codes}, {"count", c}}); }
    j["disamb_counts"] = std::move(counts);
    return j;
}

inline Codebooks codebooks_from_json(const json& j) {
    Codebooks b;
    b.scheme = scheme_from(j.at("scheme").get<std::string>());
    b.K = j.at("K").get<int>();
    b.T = j.at("T").get<int>();
    b.dim = j.at("dim").get<int>();
    b.sub_dim = j.at("sub_dim").get<int>();
    if (b.scheme == Scheme::hkmeans) {
        for (const json& n : j.at("nodes")) {
            b.nodes[n.at("prefix").get<std::vector<int>>()] =
                n.at("centroids").get<std::vector<std::vector<double>>>();
        }
    } else {
        b.levels = j.at("levels").get<std::vector<std::vector<std::vector<double>>>>();
    }
    for (const json& c : j.at("disamb_counts")) {
        b.disamb_counts[c.at("codes").get<std::vector<int>>()] = c.at("count").get<int>();
    }
    return b;
}

} // namespace gred::docid
