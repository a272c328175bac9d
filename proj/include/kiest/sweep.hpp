#pragma once

// Hyper-parameter sweeps over a prepared train/dev split. Every row reports the
// constrained vocabulary size, the selection and retrieval cardinalities and the
// dev F1 scores, so one CSV schema serves all four parameters.

#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "kiest/coherence.hpp"
#include "kiest/pipeline.hpp"
#include "kiest/trainer.hpp"

namespace kiest {

enum class SweepParam { Gamma, Epsilon, Hops, Lambda };

inline SweepParam sweep_param_from(const std::string& s) {
    if (s == "gamma") return SweepParam::Gamma;
    if (s == "epsilon") return SweepParam::Epsilon;
    if (s == "hops") return SweepParam::Hops;
    if (s == "lambda") return SweepParam::Lambda;
    throw ConfigError("sweep parameter must be gamma, epsilon, hops or lambda; got " + s);
}

inline const char* sweep_param_name(SweepParam p) {
    switch (p) {
        case SweepParam::Gamma: return "gamma";
        case SweepParam::Epsilon: return "epsilon";
        case SweepParam::Hops: return "hops";
        default: return "lambda";
    }
}

inline std::vector<double> default_sweep_values(SweepParam p) {
    switch (p) {
        case SweepParam::Gamma: return {0.0, 0.2, 0.4, 0.6, 0.8};
        case SweepParam::Epsilon: return {0.3, 0.5};
        case SweepParam::Hops: return {1, 2};
        default: return {0.0, 0.1, 0.3, 0.5};
    }
}

struct SweepInputs {
    const std::vector<Example>* train = nullptr;
    const std::vector<Example>* dev = nullptr;
    const KnowledgeGraph* graph = nullptr;
    const SelectorModel* entity_selector = nullptr;
    const SelectorModel* attribute_selector = nullptr;
    const CoherenceClassifier* classifier = nullptr;  // lambda sweeps only
    PrepareConfig prepare;
    ModelConfig model;
    TrainConfig train_cfg;
};

struct SweepRow {
    double value = 0.0;
    double vocab_size = 0.0;      // mean allowed tokens per dev input
    double selection_size = 0.0;  // mean |entities| + |attributes| per dev input
    double retrieved_size = 0.0;  // mean |C_x| per dev input
    double exact_f1 = 0.0, bleu2_f1 = 0.0, rougeL_f1 = 0.0;
    double entity_f1 = 0.0;
};

inline constexpr const char* kSweepHeader =
    "param,value,vocab_size,selection_size,retrieved_size,exact_f1,bleu2_f1,rougeL_f1,entity_f1";

inline std::string sweep_csv(SweepParam p, const std::vector<SweepRow>& rows) {
    std::ostringstream o;
    o << kSweepHeader << '\n' << std::setprecision(10);
    for (const auto& r : rows)
        o << sweep_param_name(p) << ',' << r.value << ',' << r.vocab_size << ',' << r.selection_size << ','
          << r.retrieved_size << ',' << r.exact_f1 << ',' << r.bleu2_f1 << ',' << r.rougeL_f1 << ',' << r.entity_f1
          << '\n';
    return o.str();
}

namespace detail {

struct SweepModel {
    std::vector<PreparedExample> train, dev;
    std::unique_ptr<DkgedModel> model;
};

inline SweepModel sweep_train(const SweepInputs& in, const PrepareConfig& pc, const TrainConfig& tc) {
    SweepModel s;
    s.train = prepare_all(*in.train, *in.graph, in.entity_selector, in.attribute_selector, pc);
    s.dev = prepare_all(*in.dev, *in.graph, in.entity_selector, in.attribute_selector, pc);
    s.model = std::make_unique<DkgedModel>(Vocabulary::build(vocabulary_tokens(s.train, in.graph)), in.model,
                                           in.graph->relations());
    Trainer(*s.model, tc, in.classifier).run(s.train, {});
    return s;
}

inline SweepRow sweep_measure(const SweepModel& s, double value, double gamma, std::size_t max_len) {
    SweepRow r;
    r.value = value;
    const double n = static_cast<double>(s.dev.size());
    for (const auto& p : s.dev) {
        const auto ids = s.model->source_ids(p.x);
        r.vocab_size += static_cast<double>(
                            build_constrained_vocab(ids, s.model->vocab(), s.model->embeddings(), gamma).allowed_count()) /
                        n;
        r.selection_size += static_cast<double>(p.kg.entities.size() + p.kg.attributes.size()) / n;
        r.retrieved_size += static_cast<double>(p.retrieved.hop_of.size()) / n;
    }
    std::vector<Prediction> preds;
    const EvalReport rep = evaluate_set(*s.model, s.dev, gamma, max_len, &preds);
    r.exact_f1 = rep.at(Overlap::ExactMatch).f1;
    r.bleu2_f1 = rep.at(Overlap::Bleu2).f1;
    r.rougeL_f1 = rep.at(Overlap::RougeL).f1;
    std::vector<std::vector<StateChange>> P, G;
    for (std::size_t i = 0; i < s.dev.size(); ++i) {
        P.push_back(preds[i].segmented.clauses);
        G.push_back(s.dev[i].example.gold);
    }
    r.entity_f1 = field_scores(P, G, 1).f1;
    return r;
}

}  // namespace detail

// Gamma only acts at decode time here, so one model serves every gamma row;
// the other parameters change the inputs or the objective and retrain per row.
inline std::vector<SweepRow> run_sweep(SweepParam param, const std::vector<double>& values, const SweepInputs& in) {
    if (!in.train || !in.dev || !in.graph) throw ConfigError("sweep needs train, dev and graph inputs");
    if (in.train->empty() || in.dev->empty()) throw ContractError("sweep needs non-empty train and dev sets");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<SweepRow> rows;
    if (param == SweepParam::Gamma) {
        for (double g : values)
            if (g > 1.0) throw ConfigError("gamma must be <= 1, got " + std::to_string(g));
        const auto s = detail::sweep_train(in, in.prepare, in.train_cfg);
        for (double g : values) rows.push_back(detail::sweep_measure(s, g, g, in.train_cfg.max_gen_len));
        return rows;
    }
    for (double v : values) {
        PrepareConfig pc = in.prepare;
        TrainConfig tc = in.train_cfg;
        if (param == SweepParam::Epsilon) {
            pc.epsilon = v;
        } else if (param == SweepParam::Hops) {
            if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v)))
                throw ConfigError("hops must be a positive integer, got " + std::to_string(v));
            pc.hops = static_cast<std::size_t>(v);
        } else {
            tc.lambda = v;
            if (tc.rl_start_epoch == 0) tc.rl_start_epoch = tc.epochs / 2 + 1;
        }
        const auto s = detail::sweep_train(in, pc, tc);
        rows.push_back(detail::sweep_measure(s, v, tc.gamma, tc.max_gen_len));
    }
    return rows;
}

}  // namespace kiest
