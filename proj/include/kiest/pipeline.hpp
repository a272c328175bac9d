#pragma once

// Per-example preparation: anchors, retrieval, selection and the
// entity-attribute graph, plus generation and scoring over prepared sets.

#include <string>
#include <vector>

#include "kiest/corpus.hpp"
#include "kiest/decoding.hpp"
#include "kiest/kgstore.hpp"
#include "kiest/metrics.hpp"
#include "kiest/parallel.hpp"
#include "kiest/selector.hpp"
#include "kiest/seqmodel.hpp"

namespace kiest {

enum class KnowledgeMode {
    Selected,  // thresholded selector output
    None,      // empty graph
    Raw,       // all retrieved concepts, no threshold or caps
};

inline KnowledgeMode knowledge_mode_from(const std::string& s) {
    if (s == "selected") return KnowledgeMode::Selected;
    if (s == "none") return KnowledgeMode::None;
    if (s == "raw") return KnowledgeMode::Raw;
    throw ConfigError("knowledge mode must be selected, none or raw; got " + s);
}

struct PrepareConfig {
    std::size_t hops = 1;
    std::size_t max_ngram = 4;
    double epsilon = 0.5;
    KnowledgeMode mode = KnowledgeMode::Selected;
    int max_context_sentences = -1;
};

struct PreparedExample {
    Example example;
    std::vector<std::string> x;
    std::vector<std::string> target;
    RetrievedSet retrieved;
    EntityAttributeKG kg;
};

// Inputs of the training split plus every graph concept token.
inline std::vector<std::string> selector_vocabulary(const std::vector<Example>& train, const KnowledgeGraph& graph,
                                                    int max_context_sentences = -1) {
    std::vector<std::string> toks;
    for (const auto& e : train) {
        const auto x = input_tokens(e, max_context_sentences);
        toks.insert(toks.end(), x.begin(), x.end());
    }
    for (const auto& c : graph.concepts_sorted())
        for (auto& t : split_whitespace(c)) toks.push_back(std::move(t));
    return toks;
}

struct SelectorPair {
    SelectorModel entity;
    SelectorModel attribute;
    std::vector<double> entity_history, attribute_history;
};

inline SelectorPair train_selectors(const std::vector<Example>& train, const KnowledgeGraph& graph,
                                    const SelectorConfig& cfg, int max_context_sentences = -1) {
    const auto vocab = selector_vocabulary(train, graph, max_context_sentences);
    SelectorPair p{SelectorModel(SelectorKind::Entity, vocab, cfg), SelectorModel(SelectorKind::Attribute, vocab, cfg), {}, {}};
    const auto sets = build_training_sets(train, cfg.seed, max_context_sentences);
    p.entity_history = train_selector(p.entity, sets.first);
    p.attribute_history = train_selector(p.attribute, sets.second);
    return p;
}

// Raw mode: every candidate goes to whichever selector scores it higher.
inline EntityAttributeKG raw_split(const std::vector<std::string>& x, const RetrievedSet& rs, const SelectorModel& se,
                                   const SelectorModel& sa) {
    NoGradGuard ng;
    const Tensor fe = se.encode(x), fa = sa.encode(x);
    std::vector<ScoredConcept> ents, attrs;
    for (const auto& c : rs.concepts()) {
        const double a = se.score(fe, c), b = sa.score(fa, c);
        if (a >= b)
            ents.push_back({c, a});
        else
            attrs.push_back({c, b});
    }
    return build_ea_kg(rs.anchors, ents, attrs, rs.edges);
}

inline PreparedExample prepare_example(const Example& ex, const KnowledgeGraph& graph, const SelectorModel* se,
                                       const SelectorModel* sa, const PrepareConfig& cfg) {
    PreparedExample p;
    p.example = ex;
    p.x = input_tokens(ex, cfg.max_context_sentences);
    p.target = target_tokens(ex.gold);
    if (cfg.mode == KnowledgeMode::None) return p;
    if (!se || !sa) throw ConfigError("knowledge modes other than none need both selectors");
    p.retrieved = retrieve(extract_anchors(p.x, graph, cfg.max_ngram), graph, cfg.hops);
    if (cfg.mode == KnowledgeMode::Raw) {
        p.kg = raw_split(p.x, p.retrieved, *se, *sa);
    } else {
        p.kg = build_ea_kg(p.retrieved.anchors, select(*se, p.x, p.retrieved, cfg.epsilon),
                           select(*sa, p.x, p.retrieved, cfg.epsilon), p.retrieved.edges);
    }
    return p;
}

inline std::vector<PreparedExample> prepare_all(const std::vector<Example>& examples, const KnowledgeGraph& graph,
                                                const SelectorModel* se, const SelectorModel* sa,
                                                const PrepareConfig& cfg, std::size_t threads = 1) {
    return parallel_map(examples.size(), threads,
                        [&](std::size_t i) { return prepare_example(examples[i], graph, se, sa, cfg); });
}

struct Prediction {
    std::string example_id;
    Generation generation;
    Segmented segmented;
};

inline Prediction predict(const DkgedModel& model, const PreparedExample& p, double gamma, std::size_t max_len) {
    NoGradGuard ng;
    const auto ids = model.source_ids(p.x);
    const Tensor X = model.encode_ids(ids);
    const Knowledge k = model.knowledge(p.kg);
    const ConstrainedVocab cv = build_constrained_vocab(ids, model.vocab(), model.embeddings(), gamma);
    Prediction out;
    out.example_id = p.example.id;
    out.generation = generate(model, X, k, cv, {}, max_len);
    out.segmented = segment_output(out.generation.tokens);
    return out;
}

inline std::vector<std::string> serialized(const std::vector<StateChange>& scs) {
    std::vector<std::string> out;
    for (const auto& s : scs) out.push_back(serialize_state_change(s));
    return out;
}

inline EvalReport score_predictions(const std::vector<Prediction>& preds, const std::vector<PreparedExample>& set) {
    ClauseSets p, g;
    for (std::size_t i = 0; i < set.size(); ++i) {
        p.push_back(serialized(preds[i].segmented.clauses));
        g.push_back(serialized(set[i].example.gold));
    }
    return evaluate_all(p, g);
}

// Exact-match micro scores over one field (0 attribute, 1 entity, 2 before, 3 after).
inline Prf field_scores(const std::vector<std::vector<StateChange>>& preds, const std::vector<std::vector<StateChange>>& golds,
                        std::size_t field) {
    auto pick_field = [field](const StateChange& s) {
        switch (field) {
            case 0: return s.attribute;
            case 1: return s.entity;
            case 2: return s.before;
            default: return s.after;
        }
    };
    ClauseSets p(preds.size()), g(golds.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (const auto& s : preds[i]) p[i].push_back(pick_field(s));
    for (std::size_t i = 0; i < golds.size(); ++i)
        for (const auto& s : golds[i]) g[i].push_back(pick_field(s));
    return micro_set_scores(p, g, Overlap::ExactMatch).at(Overlap::ExactMatch);
}

// Tokens for the generation vocabulary: inputs, targets and graph concepts.
inline std::vector<std::string> vocabulary_tokens(const std::vector<PreparedExample>& train, const KnowledgeGraph* graph) {
    std::vector<std::string> toks;
    for (const auto& p : train) {
        toks.insert(toks.end(), p.x.begin(), p.x.end());
        for (const auto& t : p.target)
            if (t != kEos && t != kSep) toks.push_back(t);
    }
    if (graph)
        for (const auto& c : graph->concepts_sorted())
            for (auto& t : split_whitespace(c)) toks.push_back(std::move(t));
    return toks;
}

}  // namespace kiest
