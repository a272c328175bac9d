#pragma once

// Independent brute-force references for the RGCN and the overlap metrics.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kiest/graphenc.hpp"
#include "kiest/metrics.hpp"
#include "kiest/random.hpp"

namespace kiest::oracles {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

// Dense message passing written directly from the propagation rule.
inline Mat oracle_forward(const std::vector<std::string>& order, const std::vector<Edge>& edges, Mat h,
                   const RgcnEncoder& enc) {
    const std::size_t n = order.size(), d = enc.dim();
    auto idx = [&](const std::string& s) { return static_cast<std::size_t>(std::find(order.begin(), order.end(), s) - order.begin()); };
    std::map<std::string, std::vector<std::vector<bool>>> adj;
    for (const auto& e : edges) {
        const std::size_t a = idx(e.head), b = idx(e.tail);
        if (a == b) continue;
        auto& m = adj[e.relation];
        if (m.empty()) m.assign(n, std::vector<bool>(n, false));
        m[a][b] = m[b][a] = true;
    }
    for (const auto& layer : enc.layers()) {
        Mat next(n, std::vector<double>(d, 0.0));
        const Mat w0 = to_mat(layer.self);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += h[i][j] * w0[j][k];
                for (const auto& [rel, m] : adj) {
                    const Mat wr = to_mat(layer.weight(rel));
                    std::size_t c = 0;
                    for (std::size_t u = 0; u < n; ++u) c += m[i][u];
                    for (std::size_t u = 0; u < n; ++u) {
                        if (!m[i][u]) continue;
                        for (std::size_t j = 0; j < d; ++j) s += h[u][j] * wr[j][k] / static_cast<double>(c);
                    }
                }
                next[i][k] = std::max(s, 0.0);
            }
        }
        h = next;
    }
    return h;
}

struct RandomGraph {
    std::vector<std::string> order;
    std::vector<Edge> edges;
    std::set<std::string> relations;
};

inline RandomGraph random_graph(Rng& rng) {
    RandomGraph g;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t r = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    for (std::size_t i = 0; i < n; ++i) g.order.push_back("v" + std::to_string(i));
    for (std::size_t i = 0; i < r; ++i) g.relations.insert("R" + std::to_string(i));
    std::uniform_int_distribution<std::size_t> node(0, n - 1), rel(0, r - 1);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(0, 2 * n)(rng);
    for (std::size_t i = 0; i < m; ++i)
        g.edges.push_back({g.order[node(rng)], "R" + std::to_string(rel(rng)), g.order[node(rng)]});
    return g;
}

// Naive BLEU-2: explicit n-gram loops with clipping by counting.
inline double naive_bleu2(const std::vector<std::string>& c, const std::vector<std::string>& r) {
    if (c.empty() || r.empty()) return 0.0;
    auto prec = [&](std::size_t n) {
        if (c.size() < n) return 0.0;
        std::size_t total = c.size() - n + 1, matched = 0;
        std::vector<bool> used(r.size() >= n ? r.size() - n + 1 : 0, false);
        for (std::size_t i = 0; i + n <= c.size(); ++i) {
            for (std::size_t j = 0; j + n <= r.size(); ++j) {
                if (used[j]) continue;
                bool eq = true;
                for (std::size_t k = 0; k < n; ++k) eq = eq && c[i + k] == r[j + k];
                if (eq) {
                    used[j] = true;
                    ++matched;
                    break;
                }
            }
        }
        return static_cast<double>(matched) / static_cast<double>(total);
    };
    double s = c.size() == 1 ? prec(1) : std::exp(0.5 * std::log(prec(1)) + 0.5 * std::log(prec(2)));
    if (std::isnan(s)) s = 0.0;
    if (c.size() < r.size()) s *= std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(c.size()));
    return s;
}

// Naive LCS by recursion with memo table.
inline std::size_t naive_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
    for (std::size_t i = a.size(); i-- > 0;)
        for (std::size_t j = b.size(); j-- > 0;)
            t[i][j] = a[i] == b[j] ? 1 + t[i + 1][j + 1] : std::max(t[i + 1][j], t[i][j + 1]);
    return t[0][0];
}

inline double naive_rouge(const std::vector<std::string>& c, const std::vector<std::string>& r) {
    const double l = static_cast<double>(naive_lcs(c, r));
    if (l == 0) return 0.0;
    const double p = l / c.size(), q = l / r.size();
    return 2 * p * q / (p + q);
}

inline const std::pair<const char*, const char*> kCraftedPairs[] = {
    {"the cat sat", "the cat sat"},
    {"a b c", "a b d"},
    {"a b c", "a c"},
    {"x", "x y z"},
    {"the the the the", "the cat"},
    {"length of celery was longer before and shorter afterwards", "length of celery was long before and short afterwards"},
    {"a b a b a b", "b a b a"},
    {"one two three four five", "five four three two one"},
    {"cleanness of knife was clean before and dirty afterwards", "cleanness of blade was clean before and dirty afterwards"},
    {"p q", "r s"},
};

}  // namespace kiest::oracles
