#pragma once

// Small models and random inputs shared by the unit and acceptance suites.

#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "kiest/coherence.hpp"
#include "kiest/trainer.hpp"
#include "kiest/gradsuite.hpp"
#include "kiest/seqmodel.hpp"
#include "kiest/sweep.hpp"

namespace kiest::fixtures {

using gradsuite::content_words;
using gradsuite::random_matrix;
using gradsuite::random_phrase;
using gradsuite::random_source;
using gradsuite::random_target;
using gradsuite::small_config;
using gradsuite::word_vocab;

inline const char* kFieldWords[] = {"length", "celery", "long", "short", "small", "red", "big", "cup", "water", "hot",
                        "cold", "before", "and", "of", "was", "very", "the", "a", "knife", "dry"};

// Random 1-3 word slot value; entity-like values avoid "of" and "was".
inline std::string random_field(Rng& rng, bool entity_like) {
    std::uniform_int_distribution<int> len(1, 3), w(0, std::size(kFieldWords) - 1);
    for (;;) {
        std::vector<std::string> toks;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) toks.push_back(kFieldWords[w(rng)]);
        bool ok = true;
        for (std::size_t i = 0; i + 1 < toks.size(); ++i)
            if (toks[i] == "before" && toks[i + 1] == "and") ok = false;
        if (entity_like)
            for (const auto& t : toks)
                if (t == "of" || t == "was") ok = false;
        if (ok) return join(toks);
    }
}

inline bool rows_equal(const Tensor& a, const Tensor& b, std::size_t r) {
    for (std::size_t j = 0; j < a.cols(); ++j)
        if (a.at(r, j) != b.at(r, j)) return false;
    return true;
}

struct RoutingOutcome {
    bool ok = true;
    std::size_t changed_routed = 0;  // routed positions whose logits moved
    std::string detail;
};

// Replaces C_e (which = 2) or C_a (which = 1) and checks that only positions of
// the matching routing kind change.
inline RoutingOutcome check_routing(const DkgedModel& m, const Tensor& X, const std::vector<std::string>& target,
                                    const Knowledge& k, int which, Rng& rng) {
    RoutingOutcome out;
    Knowledge k2 = k;
    const SlotKind routed = which == 2 ? SlotKind::Entity : SlotKind::Attribute;
    Tensor& replaced = which == 2 ? k2.entities : k2.attributes;
    replaced = random_matrix(replaced.rows(), replaced.cols(), rng, 3.0);
    NoGradGuard ng;
    const Tensor a = m.forward_teacher_forced(X, target, k), b = m.forward_teacher_forced(X, target, k2);
    const auto kinds = routing_kinds(target);
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        const bool same = rows_equal(a, b, i);
        if (kinds[i] == routed) {
            out.changed_routed += !same;
        } else if (!same) {
            out.ok = false;
            out.detail = "position " + std::to_string(i) + " (" + slot_kind_name(kinds[i]) + ") changed";
        }
    }
    return out;
}

using gradsuite::full_model_grad_check;
using gradsuite::small_kg;

// Slot-swap task on synthetic gold clauses: train on the first 80% of
// positives, score the rest against their own negatives.
struct CoherenceRun {
    double accuracy = 0.0;
    std::size_t held_out = 0;
    std::vector<double> history;
};

inline CoherenceRun coherence_holdout(std::uint64_t seed, std::size_t size = 500) {
    SyntheticSpec sp;
    sp.size = size;
    sp.seed = seed;
    const auto corpus = generate_synthetic(sp);
    std::vector<StateChange> pos;
    for (const auto& ex : corpus.examples) pos.insert(pos.end(), ex.gold.begin(), ex.gold.end());
    const ClassifierSplit split = holdout_split(pos, 0.8, seed + 1);
    ClassifierConfig cfg;
    cfg.seed = seed;
    CoherenceClassifier clf(clause_tokens(split.train), cfg);
    CoherenceRun run;
    run.history = train_classifier(clf, split.train);
    run.accuracy = classifier_accuracy(clf, split.held_out);
    run.held_out = split.held_out.size();
    return run;
}

// Two-armed bandit: logits [1 x 2], reward 1 for arm 1, `t` samples per step,
// REINFORCE loss, AdamW without decay. Returns p(arm 1) before each step and
// after the last.
inline std::vector<double> bandit_trace(std::uint64_t seed, std::size_t steps, std::size_t t = 8, double lr = 0.05) {
    Rng rng(seed);
    Tensor z = Tensor::from({1, 2}, {0.0, 0.0}, true);
    AdamWConfig oc;
    oc.lr = lr;
    oc.weight_decay = 0.0;
    AdamW opt({z}, oc);
    auto p1 = [&]() {
        NoGradGuard ng;
        return softmax(z, 1)[1];
    };
    std::vector<double> trace{p1()};
    for (std::size_t s = 0; s < steps; ++s) {
        const double p = p1();
        std::bernoulli_distribution arm(p);
        std::vector<Tensor> log_probs;
        std::vector<double> rewards;
        for (std::size_t j = 0; j < t; ++j) {
            const std::size_t a = arm(rng) ? 1 : 0;
            const std::size_t ids[] = {a};
            log_probs.push_back(sum(pick(log_softmax_rows(z), ids)));
            rewards.push_back(a == 1 ? 1.0 : 0.0);
        }
        backward(reinforce_loss(log_probs, rewards));
        opt.step();
        trace.push_back(p1());
    }
    return trace;
}

// Knowledge-free prepared synthetic corpus and its vocabulary.
struct ToyCorpus {
    SyntheticCorpus corpus;
    std::vector<PreparedExample> train;
    Vocabulary vocab;
};

inline ToyCorpus toy_corpus(std::size_t size, std::uint64_t seed) {
    SyntheticSpec sp;
    sp.size = size;
    sp.seed = seed;
    ToyCorpus t;
    t.corpus = generate_synthetic(sp);
    PrepareConfig pc;
    pc.mode = KnowledgeMode::None;
    t.train = prepare_all(t.corpus.examples, t.corpus.kg, nullptr, nullptr, pc);
    t.vocab = Vocabulary::build(vocabulary_tokens(t.train, nullptr));
    return t;
}

// Settings for training runs that have to finish in seconds.
inline TrainConfig desk_config(std::size_t epochs, std::uint64_t seed = 1) {
    TrainConfig c;
    c.lr_model = 3e-3;
    c.label_smoothing = 0.0;
    c.weight_decay = 0.0;
    c.gamma = 0.0;
    c.epochs = epochs;
    c.patience = 100000;
    c.seed = seed;
    return c;
}

struct OverfitRun {
    TrainResult result;
    double train_exact = 0.0;
    double seconds = 0.0;
};

inline OverfitRun overfit_run(std::uint64_t seed, std::size_t max_epochs = 300) {
    const auto toy = toy_corpus(50, seed);
    ModelConfig mc;
    mc.seed = seed;
    DkgedModel m(toy.vocab, mc, toy.corpus.kg.relations());
    TrainConfig tc = desk_config(max_epochs, seed);
    tc.eval_train = true;
    tc.eval_every = 10;
    tc.target_train_exact = 0.95;
    const auto t0 = std::chrono::steady_clock::now();
    Trainer tr(m, tc);
    OverfitRun run;
    run.result = tr.run(toy.train, {});
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.train_exact = evaluate_set(m, toy.train, tc.gamma, tc.max_gen_len).at(Overlap::ExactMatch).f1;
    return run;
}

// Selected vs no-knowledge vs unfiltered knowledge on a held-out split of a
// knowledge-dependent corpus with six distractor entities per object.
struct KnowledgeBenefit {
    double selected_entity = 0.0, none_entity = 0.0, raw_entity = 0.0;
    double selected_precision = 0.0, none_precision = 0.0, raw_precision = 0.0;
};

inline KnowledgeBenefit knowledge_benefit(std::uint64_t seed, std::size_t epochs = 40) {
    SyntheticSpec sp;
    sp.size = 500;
    sp.seed = seed;
    sp.distractor_entities = 6;
    const auto sc = generate_synthetic(sp);
    const std::vector<Example> tr(sc.examples.begin(), sc.examples.begin() + 400), te(sc.examples.begin() + 400, sc.examples.end());
    SelectorConfig scfg;
    scfg.seed = seed;
    const SelectorPair sel = train_selectors(tr, sc.kg, scfg);
    const SelectorModel &se = sel.entity, &sa = sel.attribute;
    KnowledgeBenefit out;
    for (auto mode : {KnowledgeMode::Selected, KnowledgeMode::None, KnowledgeMode::Raw}) {
        PrepareConfig pc;
        pc.mode = mode;
        const auto ptr = prepare_all(tr, sc.kg, &se, &sa, pc), pte = prepare_all(te, sc.kg, &se, &sa, pc);
        ModelConfig mc;
        mc.seed = seed;
        DkgedModel m(Vocabulary::build(vocabulary_tokens(ptr, &sc.kg)), mc, sc.kg.relations());
        TrainConfig tc = desk_config(epochs, seed);
        tc.label_smoothing = 0.1;
        tc.eval_every = epochs;
        Trainer(m, tc).run(ptr, {});
        std::vector<Prediction> preds;
        const EvalReport rep = evaluate_set(m, pte, tc.gamma, tc.max_gen_len, &preds);
        std::vector<std::vector<StateChange>> P, G;
        for (std::size_t i = 0; i < pte.size(); ++i) {
            P.push_back(preds[i].segmented.clauses);
            G.push_back(pte[i].example.gold);
        }
        const double ent = field_scores(P, G, 1).f1, prec = rep.at(Overlap::ExactMatch).precision;
        if (mode == KnowledgeMode::Selected) {
            out.selected_entity = ent;
            out.selected_precision = prec;
        } else if (mode == KnowledgeMode::None) {
            out.none_entity = ent;
            out.none_precision = prec;
        } else {
            out.raw_entity = ent;
            out.raw_precision = prec;
        }
    }
    return out;
}

// The 50-example synthetic fixture split 40/10, with trained selectors.
struct SweepFixture {
    SyntheticCorpus corpus;
    std::vector<Example> train, dev;
    std::unique_ptr<SelectorPair> selectors;

    SweepInputs inputs(std::size_t epochs) const {
        SweepInputs in;
        in.train = &train;
        in.dev = &dev;
        in.graph = &corpus.kg;
        in.entity_selector = &selectors->entity;
        in.attribute_selector = &selectors->attribute;
        in.train_cfg = desk_config(epochs);
        in.train_cfg.eval_every = epochs;
        return in;
    }
};

inline SweepFixture sweep_fixture() {
    SweepFixture f;
    f.corpus = generate_synthetic({});
    f.train.assign(f.corpus.examples.begin(), f.corpus.examples.begin() + 40);
    f.dev.assign(f.corpus.examples.begin() + 40, f.corpus.examples.end());
    f.selectors = std::make_unique<SelectorPair>(train_selectors(f.train, f.corpus.kg, {}));
    return f;
}

}  // namespace kiest::fixtures
