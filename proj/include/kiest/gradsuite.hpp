#pragma once

// Finite-difference checks over every differentiable piece: tensor primitives,
// attention and layer norm, the RGCN, the selector loss, the REINFORCE loss and
// the whole teacher-forced model.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kiest/coherence.hpp"
#include "kiest/graphenc.hpp"
#include "kiest/numerics/gradcheck.hpp"
#include "kiest/numerics/nn.hpp"
#include "kiest/selector.hpp"
#include "kiest/seqmodel.hpp"

namespace kiest::gradsuite {

constexpr double kTolerance = 1e-4;

// Reserved + template block plus w000, w001, ... up to `size` tokens.
inline Vocabulary word_vocab(std::size_t size) {
    std::vector<std::string> words;
    const std::size_t base = Vocabulary().size();
    char buf[16];
    for (std::size_t i = base; i < size; ++i) {
        std::snprintf(buf, sizeof buf, "w%03zu", i - base);  // sorted order = numeric order
        words.push_back(buf);
    }
    return Vocabulary::build(words);
}

inline std::vector<std::string> content_words(const Vocabulary& v) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!Vocabulary::is_reserved(i) && !v.is_template(i)) out.push_back(v.token(i));
    return out;
}

inline ModelConfig small_config(std::size_t layers, std::size_t d, std::uint64_t seed) {
    ModelConfig c;
    c.d_model = d;
    c.n_layers = layers;
    c.n_heads = 1;
    c.d_ff = 2 * d;
    c.max_src_len = 12;
    c.max_tgt_len = 32;
    c.rgcn_layers = 1;
    c.seed = seed;
    return c;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    std::vector<double> v(r * c);
    for (auto& x : v) x = g(rng);
    return Tensor::from({r, c}, v);
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng);
    return Tensor::from(std::move(shape), std::move(v), rg);
}

inline std::string random_phrase(const std::vector<std::string>& words, Rng& rng, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> n(1, max_len), w(0, words.size() - 1);
    std::vector<std::string> t;
    for (std::size_t i = n(rng); i > 0; --i) t.push_back(words[w(rng)]);
    return join(t);
}

// 1 .. max_clauses random clauses over the vocabulary's content words.
inline std::vector<std::string> random_target(const Vocabulary& v, Rng& rng, std::size_t max_clauses = 2) {
    const auto words = content_words(v);
    std::vector<StateChange> scs;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, max_clauses)(rng);
    for (std::size_t i = 0; i < n; ++i)
        scs.push_back({random_phrase(words, rng, 2), random_phrase(words, rng, 2), random_phrase(words, rng, 2),
                       random_phrase(words, rng, 2)});
    return target_tokens(scs);
}

inline std::vector<std::string> random_source(const Vocabulary& v, Rng& rng, std::size_t len) {
    const auto words = content_words(v);
    std::uniform_int_distribution<std::size_t> w(0, words.size() - 1);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < len; ++i) out.push_back(words[w(rng)]);
    return out;
}

// Connected graph over the vocabulary's first content words: one anchor,
// three entities (one multi-word), two attributes.
inline EntityAttributeKG small_kg(const Vocabulary& v) {
    const auto w = content_words(v);
    EntityAttributeKG kg;
    kg.anchors = {w[0]};
    kg.entities = {{w[1], 0.9}, {w[2] + " " + w[3], 0.8}, {w[5], 0.7}};
    kg.attributes = {{w[4], 0.7}, {w[6], 0.6}};
    kg.edges = {{w[0], "RelatedTo", w[1]},
                {w[1], "HasProperty", w[4]},
                {w[2] + " " + w[3], "RelatedTo", w[4]},
                {w[5], "HasProperty", w[6]},
                {w[0], "RelatedTo", w[5]}};
    return kg;
}

// Whole teacher-forced forward pass, knowledge encoder included, over every
// parameter; the scalar is a fixed random projection of all logits. Weights are
// redrawn from N(0, 0.5) first (layer norms untouched): at the default init many
// true gradients fall below what central differences resolve in float64.
inline double full_model_grad_check(DkgedModel& m, const std::vector<std::string>& x, const EntityAttributeKG& kg,
                                    const std::vector<std::string>& target, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 0.5);
    for (const auto& p : m.params().params()) {
        if (p.name.find(".ln_") != std::string::npos) continue;
        Tensor t = p.tensor;
        for (auto& v : t.mutable_data()) v = g(rng);
    }
    const Tensor probe = random_matrix(target.size(), m.vocab().size(), rng);
    auto loss = [&]() {
        const Knowledge k = m.knowledge(kg);
        return sum(mul(m.forward_teacher_forced(x, target, k), probe));
    };
    return grad_check_params(loss, m.params().tensors());
}

struct CheckResult {
    std::string name;
    double error = 0.0;
    bool passed() const { return error < kTolerance; }
};

struct SuiteReport {
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    double worst() const {
        double w = 0.0;
        for (const auto& c : checks) w = std::max(w, c.error);
        return w;
    }
    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed()) return false;
        return !checks.empty();
    }
};

namespace detail {

inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(y, uniform_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

inline void primitives(std::vector<CheckResult>& out) {
    Rng rng(9);
    const Tensor other = uniform_tensor({3, 4}, rng, -1, 1, false);
    const Tensor right = uniform_tensor({4, 2}, rng, -1, 1, false);
    const Tensor rowv = uniform_tensor({1, 4}, rng, -1, 1, false);
    const Tensor gain = uniform_tensor({1, 4}, rng, 0.5, 1.5, false);
    const std::vector<std::size_t> ids{2, 0, 2, 1}, picks{3, 0, 1}, choice{1, 0, 1};
    Aggregation agg;
    agg.rows = {{{0, 0.5}, {2, 0.5}}, {}, {{1, 1.0}, {0, -0.25}}};
    std::vector<std::pair<std::string, std::function<Tensor(const Tensor&)>>> fns;
    fns.push_back({"add", [&](const Tensor& x) { return weighted_sum(add(x, other), 1); }});
    fns.push_back({"sub", [&](const Tensor& x) { return weighted_sum(sub(other, x), 2); }});
    fns.push_back({"mul", [&](const Tensor& x) { return weighted_sum(mul(x, x), 3); }});
    fns.push_back({"scale", [&](const Tensor& x) { return weighted_sum(scale(x, -1.7), 4); }});
    fns.push_back({"relu", [&](const Tensor& x) { return weighted_sum(relu(x), 5); }});
    fns.push_back({"log", [&](const Tensor& x) {
        return weighted_sum(log(add_constant(mul(x, x), std::vector<double>(12, 0.5))), 6);
    }});
    fns.push_back({"mean", [&](const Tensor& x) { return mean(mul(x, other)); }});
    fns.push_back({"mean_rows", [&](const Tensor& x) { return weighted_sum(mean_rows(x), 7); }});
    fns.push_back({"norm", [&](const Tensor& x) { return norm(x); }});
    fns.push_back({"matmul", [&](const Tensor& x) { return weighted_sum(matmul(x, right), 8); }});
    fns.push_back({"transpose", [&](const Tensor& x) { return weighted_sum(transpose(x), 9); }});
    fns.push_back({"reshape", [&](const Tensor& x) { return weighted_sum(reshape(x, {2, 6}), 10); }});
    fns.push_back({"add_row", [&](const Tensor& x) { return weighted_sum(add_row(x, mean_rows(x)), 11); }});
    fns.push_back({"slice_cols", [&](const Tensor& x) { return weighted_sum(slice_cols(x, 1, 2), 12); }});
    fns.push_back({"concat", [&](const Tensor& x) {
        std::vector<Tensor> c{x, other};
        return add(weighted_sum(concat_cols(c), 13), weighted_sum(concat_rows(c), 14));
    }});
    fns.push_back({"gather_rows", [&](const Tensor& x) { return weighted_sum(gather_rows(x, ids), 15); }});
    fns.push_back({"merge_rows", [&](const Tensor& x) {
        std::vector<Tensor> o{x, mul(x, other)};
        return weighted_sum(merge_rows(o, choice), 16);
    }});
    fns.push_back({"pick", [&](const Tensor& x) { return weighted_sum(pick(x, picks), 17); }});
    fns.push_back({"aggregate", [&](const Tensor& x) { return weighted_sum(aggregate(x, agg), 18); }});
    fns.push_back({"softmax", [&](const Tensor& x) { return weighted_sum(softmax(x, 1), 19); }});
    fns.push_back({"log_softmax", [&](const Tensor& x) { return weighted_sum(log_softmax_rows(x), 20); }});
    fns.push_back({"layer_norm", [&](const Tensor& x) { return weighted_sum(layer_norm(x, gain, rowv), 21); }});
    fns.push_back({"sum_scalars", [&](const Tensor& x) {
        std::vector<Tensor> s{sum(x), norm(x)};
        return sum_scalars(s);
    }});
    fns.push_back({"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, picks, 0.1); }});
    for (const auto& [name, fn] : fns) {
        double worst = 0.0;
        for (int trial = 0; trial < 5; ++trial) worst = std::max(worst, grad_check(fn, uniform_tensor({3, 4}, rng)));
        out.push_back({name, worst});
    }
}

inline void modules(std::vector<CheckResult>& out) {
    Rng rng(10);
    {
        ParameterStore ps;
        MultiHeadAttention mha(ps, "mha", 4, 2, rng);
        LayerNorm ln(ps, "ln", 4);
        const Tensor q = uniform_tensor({3, 4}, rng, -1, 1, false), kv = uniform_tensor({5, 4}, rng, -1, 1, false);
        out.push_back({"attention+layer_norm",
                       grad_check_params([&] { return weighted_sum(ln(add(mha(q, kv), q)), 30); }, ps.tensors())});
        out.push_back({"causal_attention",
                       grad_check_params([&] { return weighted_sum(mha(kv, kv, true), 31); }, ps.tensors())});
    }
    {
        ParameterStore ps;
        const std::vector<std::string> order{"a", "b", "c", "d", "e"};
        const std::vector<Edge> edges{{"a", "R0", "b"}, {"b", "R1", "c"}, {"c", "R0", "d"}, {"a", "R1", "d"}, {"e", "R0", "a"}};
        RgcnEncoder enc(ps, "g", 3, 2, {"R0", "R1"}, rng);
        const Tensor init = uniform_tensor({5, 3}, rng);
        auto params = ps.tensors();
        params.push_back(init);
        out.push_back({"rgcn", grad_check_params([&] {
                           const Tensor h = enc.forward(order, edges, init);
                           return sum(mul(h, h));
                       }, params)});
    }
    {
        SelectorConfig c;
        c.embed_dim = 4;
        c.out_dim = 3;
        c.margin = 2.0;  // keeps every hinge active, away from the kink
        SelectorModel sel(SelectorKind::Entity, {"stir", "the", "soup", "pot", "spoon", "hot"}, c);
        const TripletBatch b{{"stir", "the", "soup"}, {"pot", "spoon"}, {"hot"}};
        out.push_back({"triplet_loss", grad_check_params([&] { return sel.triplet_loss(b); }, sel.params().tensors())});
    }
    {
        const Tensor logits = uniform_tensor({3, 5}, rng);
        const std::vector<double> rewards{0.7, -0.2};
        out.push_back({"reinforce_loss", grad_check([&](const Tensor& z) {
                           const Tensor lp = log_softmax_rows(z);
                           const std::vector<std::size_t> a{1, 4, 0}, b{2, 2, 3};
                           std::vector<Tensor> seqs{sum(pick(lp, a)), sum(pick(lp, b))};
                           return reinforce_loss(seqs, rewards);
                       }, logits)});
    }
}

inline void full_model(std::vector<CheckResult>& out) {
    const Vocabulary v = word_vocab(30);
    DkgedModel m(v, small_config(1, 8, 61), {"RelatedTo", "HasProperty"});
    Rng rng(17);
    const auto x = random_source(v, rng, 4);
    const auto target = random_target(v, rng, 1);
    for (std::uint64_t seed : {61, 63, 64})
        out.push_back({"dkged_model(seed " + std::to_string(seed) + ")",
                       full_model_grad_check(m, x, small_kg(v), target, seed)});
}

}  // namespace detail

inline SuiteReport run_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteReport r;
    detail::primitives(r.checks);
    detail::modules(r.checks);
    detail::full_model(r.checks);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace kiest::gradsuite
