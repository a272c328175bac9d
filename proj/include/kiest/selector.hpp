#pragma once

// Triplet-trained concept selectors and the entity-attribute graph they feed.

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "kiest/corpus.hpp"
#include "kiest/kgstore.hpp"
#include "kiest/numerics/checkpoint.hpp"
#include "kiest/numerics/nn.hpp"
#include "kiest/numerics/optim.hpp"

namespace kiest {

enum class SelectorKind { Entity, Attribute };

inline const char* selector_kind_name(SelectorKind k) { return k == SelectorKind::Entity ? "entity" : "attribute"; }

struct SelectorConfig {
    std::size_t embed_dim = 32;
    std::size_t out_dim = 32;
    double margin = 1.0;
    std::size_t epochs = 40;
    double lr = 1e-2;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
    std::size_t max_entities = 1000;
    std::size_t max_attributes = 140;
};

struct TripletBatch {
    std::vector<std::string> x;
    std::vector<std::string> positives;
    std::vector<std::string> negatives;
};

struct ScoredConcept {
    std::string name;
    double score = 0.0;

    friend bool operator==(const ScoredConcept&, const ScoredConcept&) = default;
};

// f(text) = mean(embedding(tokens)) * W.
class SelectorModel {
public:
    SelectorModel(SelectorKind kind, const std::vector<std::string>& vocabulary, const SelectorConfig& cfg)
        : kind_(kind), cfg_(cfg) {
        std::set<std::string> uniq(vocabulary.begin(), vocabulary.end());
        tokens_.push_back("<unk>");
        for (const auto& t : uniq)
            if (t != "<unk>") tokens_.push_back(t);
        for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
        Rng rng(cfg.seed);
        table_ = ps_.add_uniform("sel.emb", {tokens_.size(), cfg.embed_dim}, cfg.embed_dim, rng);
        proj_ = Linear(ps_, "sel.proj", cfg.embed_dim, cfg.out_dim, rng, false);
    }

    SelectorKind kind() const { return kind_; }
    const SelectorConfig& config() const { return cfg_; }
    ParameterStore& params() { return ps_; }
    const ParameterStore& params() const { return ps_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::size_t id_of(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? 0 : it->second;
    }

    Tensor encode(const std::vector<std::string>& toks) const {
        if (toks.empty()) throw ContractError("selector cannot encode an empty text");
        std::vector<std::size_t> ids;
        ids.reserve(toks.size());
        for (const auto& t : toks) ids.push_back(id_of(t));
        return proj_(mean_rows(gather_rows(table_, ids)));
    }

    Tensor encode_concept(const std::string& c) const { return encode(split_whitespace(c)); }

    // Mean over (positive, negative) pairs of max(|fx-fp| - |fx-fn| + margin, 0).
    Tensor triplet_loss(const TripletBatch& b) const {
        if (b.positives.empty() || b.negatives.empty()) throw ContractError("triplet batch needs positives and negatives");
        const Tensor fx = encode(b.x);
        std::vector<Tensor> dp, dn;
        for (const auto& p : b.positives) dp.push_back(norm(sub(fx, encode_concept(p))));
        for (const auto& n : b.negatives) dn.push_back(norm(sub(fx, encode_concept(n))));
        std::vector<Tensor> terms;
        for (const auto& p : dp) {
            for (const auto& n : dn) {
                const double m[] = {cfg_.margin};
                terms.push_back(relu(add_constant(sub(p, n), m)));
            }
        }
        return scale(sum_scalars(terms), 1.0 / static_cast<double>(terms.size()));
    }

    double score(const Tensor& fx, const std::string& c) const {
        NoGradGuard ng;
        const Tensor fc = encode_concept(c);
        return (1.0 + cosine_similarity(fx.data(), fc.data())) / 2.0;
    }

    std::string metadata() const {
        nlohmann::json j;
        j["kind"] = selector_kind_name(kind_);
        j["embed_dim"] = cfg_.embed_dim;
        j["out_dim"] = cfg_.out_dim;
        j["margin"] = cfg_.margin;
        j["tokens"] = tokens_;
        return j.dump();
    }

    void save(const std::string& path) const { save_checkpoint(path, snapshot(ps_, metadata())); }

    static SelectorModel load(const std::string& path) {
        const Checkpoint ck = load_checkpoint(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(ck.metadata);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("selector checkpoint metadata is not JSON: " + std::string(e.what()));
        }
        SelectorConfig cfg;
        cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
        cfg.out_dim = j.at("out_dim").get<std::size_t>();
        cfg.margin = j.at("margin").get<double>();
        const auto kind = j.at("kind").get<std::string>() == "entity" ? SelectorKind::Entity : SelectorKind::Attribute;
        SelectorModel m(kind, j.at("tokens").get<std::vector<std::string>>(), cfg);
        restore(m.ps_, ck);
        return m;
    }

private:
    SelectorKind kind_;
    SelectorConfig cfg_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
    ParameterStore ps_;
    Tensor table_;
    Linear proj_;
};

// Positives are the example's gold entities (attributes); an equal number of
// negatives is drawn from other examples' golds, never from the positives.
inline std::pair<std::vector<TripletBatch>, std::vector<TripletBatch>> build_training_sets(
    const std::vector<Example>& corpus, std::uint64_t seed, int max_context_sentences = -1) {
    Rng rng(seed);
    std::pair<std::vector<TripletBatch>, std::vector<TripletBatch>> out;
    for (int which = 0; which < 2; ++which) {
        auto field = [&](const StateChange& s) { return which == 0 ? s.entity : s.attribute; };
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto& ex = corpus[i];
            if (ex.gold.empty()) continue;
            std::set<std::string> pos;
            for (const auto& s : ex.gold) pos.insert(field(s));
            std::set<std::string> pool;
            for (std::size_t j = 0; j < corpus.size(); ++j) {
                if (j == i) continue;
                for (const auto& s : corpus[j].gold)
                    if (!pos.count(field(s))) pool.insert(field(s));
            }
            if (pool.empty()) continue;
            std::vector<std::string> cand(pool.begin(), pool.end());
            std::shuffle(cand.begin(), cand.end(), rng);
            TripletBatch b;
            b.x = input_tokens(ex, max_context_sentences);
            b.positives.assign(pos.begin(), pos.end());
            // With fewer candidates than positives, negatives repeat.
            for (std::size_t k = 0; k < pos.size(); ++k) b.negatives.push_back(cand[k % cand.size()]);
            (which == 0 ? out.first : out.second).push_back(std::move(b));
        }
    }
    return out;
}

// Returns the mean triplet loss of each epoch.
inline std::vector<double> train_selector(SelectorModel& model, const std::vector<TripletBatch>& batches) {
    const auto& cfg = model.config();
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(model.params().tensors(), oc);
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(batches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> history;
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (auto i : order) {
            Tensor loss = model.triplet_loss(batches[i]);
            total += loss.item();
            backward(loss);
            opt.step();
        }
        history.push_back(batches.empty() ? 0.0 : total / static_cast<double>(batches.size()));
    }
    return history;
}

// Candidates scoring above eps, best first, truncated to `cap`.
inline std::vector<ScoredConcept> select(const SelectorModel& model, const std::vector<std::string>& x,
                                         const std::vector<std::string>& candidates, double eps, std::size_t cap) {
    NoGradGuard ng;
    const Tensor fx = model.encode(x);
    std::vector<ScoredConcept> out;
    for (const auto& c : candidates) {
        const double s = model.score(fx, c);
        if (s > eps) out.push_back({c, s});
    }
    std::sort(out.begin(), out.end(), [](const ScoredConcept& a, const ScoredConcept& b) {
        return a.score != b.score ? a.score > b.score : a.name < b.name;
    });
    if (out.size() > cap) out.resize(cap);
    return out;
}

inline std::vector<ScoredConcept> select(const SelectorModel& model, const std::vector<std::string>& x,
                                         const RetrievedSet& candidates, double eps) {
    const auto& cfg = model.config();
    return select(model, x, candidates.concepts(), eps,
                  model.kind() == SelectorKind::Entity ? cfg.max_entities : cfg.max_attributes);
}

struct EntityAttributeKG {
    std::vector<std::string> anchors;
    std::vector<ScoredConcept> entities;
    std::vector<ScoredConcept> attributes;
    std::vector<Edge> edges;  // endpoints all present, no self loops, sorted

    bool empty() const { return anchors.empty() && entities.empty() && attributes.empty(); }

    // anchors, then entities, then attributes
    std::vector<std::string> nodes() const {
        std::vector<std::string> out = anchors;
        for (const auto& e : entities) out.push_back(e.name);
        for (const auto& a : attributes) out.push_back(a.name);
        return out;
    }
};

// A concept kept by both selectors goes to the higher score; ties to entity.
inline void resolve_overlap(std::vector<ScoredConcept>& entities, std::vector<ScoredConcept>& attributes) {
    std::map<std::string, double> es, as;
    for (const auto& e : entities) es[e.name] = e.score;
    for (const auto& a : attributes) as[a.name] = a.score;
    std::erase_if(entities, [&](const ScoredConcept& e) {
        auto it = as.find(e.name);
        return it != as.end() && it->second > e.score;
    });
    std::erase_if(attributes, [&](const ScoredConcept& a) {
        auto it = es.find(a.name);
        return it != es.end() && it->second >= a.score;
    });
}

// Induced graph over anchors + selected concepts; isolated nodes are removed
// until none remain.
inline EntityAttributeKG build_ea_kg(const std::vector<std::string>& anchors, std::vector<ScoredConcept> entities,
                                     std::vector<ScoredConcept> attributes, const std::vector<Edge>& edges) {
    resolve_overlap(entities, attributes);
    EntityAttributeKG g;
    std::set<std::string> selected;
    for (const auto& e : entities) selected.insert(e.name);
    for (const auto& a : attributes) selected.insert(a.name);
    std::set<std::string> anchor_set;
    for (const auto& a : anchors)
        if (!selected.count(a)) anchor_set.insert(a);
    std::set<std::string> alive = selected;
    alive.insert(anchor_set.begin(), anchor_set.end());
    std::set<Edge> kept;
    for (const auto& e : edges)
        if (e.head != e.tail && alive.count(e.head) && alive.count(e.tail)) kept.insert(e);
    for (;;) {
        std::map<std::string, std::size_t> degree;
        for (const auto& e : kept) {
            ++degree[e.head];
            ++degree[e.tail];
        }
        std::vector<std::string> dead;
        for (const auto& n : alive)
            if (!degree.count(n)) dead.push_back(n);
        if (dead.empty()) break;
        for (const auto& n : dead) alive.erase(n);
        std::erase_if(kept, [&](const Edge& e) { return !alive.count(e.head) || !alive.count(e.tail); });
    }
    for (const auto& a : anchor_set)
        if (alive.count(a)) g.anchors.push_back(a);
    for (const auto& e : entities)
        if (alive.count(e.name)) g.entities.push_back(e);
    for (const auto& a : attributes)
        if (alive.count(a.name)) g.attributes.push_back(a);
    g.edges.assign(kept.begin(), kept.end());
    return g;
}

}  // namespace kiest
