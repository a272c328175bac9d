#pragma once

// Coherence classifier, slot-swap negatives, reward and policy-gradient loss.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "kiest/corpus.hpp"
#include "kiest/decoding.hpp"
#include "kiest/numerics/checkpoint.hpp"
#include "kiest/numerics/nn.hpp"
#include "kiest/numerics/optim.hpp"

namespace kiest {

namespace detail {

inline std::string& slot_ref(StateChange& s, std::size_t slot) {
    switch (slot) {
        case 0: return s.attribute;
        case 1: return s.entity;
        case 2: return s.before;
        default: return s.after;
    }
}

}  // namespace detail

// One uniformly chosen slot of each positive is replaced by the same slot of
// another positive. Instances with no usable replacement are skipped.
inline std::vector<StateChange> make_negatives(const std::vector<StateChange>& positives, std::uint64_t seed,
                                               std::vector<std::string>* warnings = nullptr) {
    if (positives.size() < 2) throw ContractError("make_negatives needs at least 2 positives");
    Rng rng(seed);
    const std::set<StateChange> pos_set(positives.begin(), positives.end());
    std::array<std::vector<std::string>, 4> values;
    for (std::size_t slot = 0; slot < 4; ++slot) {
        std::set<std::string> uniq;
        for (auto s : positives) uniq.insert(detail::slot_ref(s, slot));
        values[slot].assign(uniq.begin(), uniq.end());
    }
    std::vector<StateChange> out;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        std::array<std::size_t, 4> slots{0, 1, 2, 3};
        std::shuffle(slots.begin(), slots.end(), rng);
        bool made = false;
        for (std::size_t slot : slots) {
            StateChange src = positives[i];
            const std::string orig = detail::slot_ref(src, slot);
            std::vector<std::string> cand;
            for (const auto& v : values[slot])
                if (v != orig) cand.push_back(v);
            std::shuffle(cand.begin(), cand.end(), rng);
            for (const auto& v : cand) {
                StateChange neg = src;
                detail::slot_ref(neg, slot) = v;
                if (pos_set.count(neg)) continue;
                out.push_back(std::move(neg));
                made = true;
                break;
            }
            if (made) break;
        }
        if (!made && warnings) warnings->push_back("no negative constructible for positive " + std::to_string(i));
    }
    return out;
}

struct ClassifierConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t d_ff = 64;
    std::size_t n_layers = 1;
    std::size_t max_len = 32;
    double dropout = 0.1;
    std::size_t epochs = 60;
    std::size_t batch = 32;
    double lr = 2e-3;
    double weight_decay = 0.01;
    std::uint64_t seed = 3;
};

// Embedding + encoder layers + mean-pool + dropout + 2-way head.
class CoherenceClassifier {
public:
    CoherenceClassifier(const std::vector<std::string>& vocabulary, const ClassifierConfig& cfg) : cfg_(cfg) {
        std::set<std::string> uniq(vocabulary.begin(), vocabulary.end());
        tokens_.push_back("<unk>");
        for (const auto& t : uniq)
            if (t != "<unk>") tokens_.push_back(t);
        for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
        Rng rng(cfg.seed);
        // Unit-scale embeddings: at 1/sqrt(d) training sits on a ~50 epoch plateau.
        embed_ = ps_.add_uniform("clf.emb", {tokens_.size(), cfg.d_model}, 1, rng);
        pos_ = ps_.add_uniform("clf.pos", {cfg.max_len, cfg.d_model}, cfg.d_model, rng);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            layers_.emplace_back(ps_, "clf.enc" + std::to_string(l), cfg.d_model, cfg.n_heads, cfg.d_ff, rng);
        // Zero head: an untrained classifier is exactly undecided.
        head_.weight = ps_.add_constant("clf.head.w", {cfg.d_model, 2}, 0.0);
        head_.bias = ps_.add_constant("clf.head.b", {1, 2}, 0.0);
    }

    ParameterStore& params() { return ps_; }
    const ParameterStore& params() const { return ps_; }
    const ClassifierConfig& config() const { return cfg_; }

    // Logits [1 x 2]; dropout is active only when `rng` is given.
    Tensor logits(const std::vector<std::string>& toks, Rng* rng = nullptr) const {
        if (toks.empty()) throw ContractError("cannot classify an empty clause");
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < toks.size() && i < cfg_.max_len; ++i) {
            auto it = ids_.find(toks[i]);
            ids.push_back(it == ids_.end() ? 0 : it->second);
        }
        Tensor h = embed_with_positions(embed_, pos_, ids);
        for (const auto& layer : layers_) h = layer(h);
        Tensor pooled = mean_rows(h);
        if (rng) pooled = dropout(pooled, cfg_.dropout, *rng);
        return head_(pooled);
    }

    // (p(l0|s), p(l1|s)), deterministic.
    std::pair<double, double> classify(const std::vector<std::string>& toks) const {
        NoGradGuard ng;
        const Tensor p = softmax(logits(toks), 1);
        return {p[0], p[1]};
    }

    std::pair<double, double> classify(const StateChange& s) const {
        return classify(split_whitespace(serialize_state_change(s)));
    }

    std::string metadata() const {
        nlohmann::json j;
        j["kind"] = "classifier";
        j["d_model"] = cfg_.d_model;
        j["n_heads"] = cfg_.n_heads;
        j["d_ff"] = cfg_.d_ff;
        j["n_layers"] = cfg_.n_layers;
        j["max_len"] = cfg_.max_len;
        j["dropout"] = cfg_.dropout;
        j["tokens"] = tokens_;
        return j.dump();
    }

    void save(const std::string& path) const { save_checkpoint(path, snapshot(ps_, metadata())); }

    static CoherenceClassifier load(const std::string& path) {
        const Checkpoint ck = load_checkpoint(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(ck.metadata);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("classifier checkpoint metadata is not JSON: " + std::string(e.what()));
        }
        ClassifierConfig cfg;
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.d_ff = j.at("d_ff").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.max_len = j.at("max_len").get<std::size_t>();
        cfg.dropout = j.at("dropout").get<double>();
        CoherenceClassifier c(j.at("tokens").get<std::vector<std::string>>(), cfg);
        restore(c.ps_, ck);
        return c;
    }

private:
    ClassifierConfig cfg_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
    ParameterStore ps_;
    Tensor embed_, pos_;
    std::vector<EncoderLayer> layers_;
    Linear head_;
};

struct LabeledClause {
    std::vector<std::string> tokens;
    std::size_t label = 0;  // 1 = coherent
};

inline std::vector<LabeledClause> classifier_dataset(const std::vector<StateChange>& positives,
                                                     const std::vector<StateChange>& negatives) {
    std::vector<LabeledClause> out;
    for (const auto& p : positives) out.push_back({split_whitespace(serialize_state_change(p)), 1});
    for (const auto& n : negatives) out.push_back({split_whitespace(serialize_state_change(n)), 0});
    return out;
}

inline std::vector<std::string> clause_tokens(const std::vector<StateChange>& scs) {
    std::vector<std::string> out;
    for (const auto& s : scs)
        for (auto& t : split_whitespace(serialize_state_change(s))) out.push_back(std::move(t));
    return out;
}

struct ClassifierSplit {
    std::vector<StateChange> train;
    std::vector<LabeledClause> held_out;  // remaining positives plus one negative each
};

// The first floor(n * train_fraction) positives train; the rest are held out.
inline ClassifierSplit holdout_split(const std::vector<StateChange>& positives, double train_fraction,
                                     std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train fraction must be in (0, 1]");
    const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(positives.size()) * train_fraction + 1e-9));
    ClassifierSplit s;
    s.train.assign(positives.begin(), positives.begin() + static_cast<std::ptrdiff_t>(cut));
    const std::vector<StateChange> test(positives.begin() + static_cast<std::ptrdiff_t>(cut), positives.end());
    s.held_out = classifier_dataset(test, make_negatives(test, seed));
    return s;
}

inline std::string classifier_json_line(const LabeledClause& c) {
    nlohmann::ordered_json j;
    j["text"] = join(c.tokens);
    j["label"] = c.label;
    return j.dump();
}

inline double classifier_accuracy(const CoherenceClassifier& clf, const std::vector<LabeledClause>& data) {
    if (data.empty()) return 0.0;
    std::size_t right = 0;
    for (const auto& c : data) {
        const auto [p0, p1] = clf.classify(c.tokens);
        if ((p1 > p0 ? 1u : 0u) == c.label) ++right;
    }
    return static_cast<double>(right) / static_cast<double>(data.size());
}

namespace detail {

template <class EpochData>
std::vector<double> train_classifier_loop(CoherenceClassifier& clf, EpochData&& epoch_data) {
    const auto& cfg = clf.config();
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(clf.params().tensors(), oc);
    Rng rng(cfg.seed + 17);
    std::vector<double> history;
    const std::size_t bs = std::max<std::size_t>(cfg.batch, 1);
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
        std::vector<LabeledClause> data = epoch_data(ep);
        std::shuffle(data.begin(), data.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < data.size(); start += bs) {
            const std::size_t end = std::min(data.size(), start + bs);
            std::vector<Tensor> losses;
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t target[] = {data[i].label};
                losses.push_back(cross_entropy(clf.logits(data[i].tokens, &rng), target));
            }
            Tensor loss = scale(sum_scalars(losses), 1.0 / static_cast<double>(losses.size()));
            total += loss.item() * static_cast<double>(losses.size());
            backward(loss);
            opt.step();
        }
        history.push_back(data.empty() ? 0.0 : total / static_cast<double>(data.size()));
    }
    return history;
}

}  // namespace detail

// Mini-batch cross-entropy training on a fixed set; returns the mean loss per epoch.
inline std::vector<double> train_classifier(CoherenceClassifier& clf, const std::vector<LabeledClause>& data) {
    return detail::train_classifier_loop(clf, [&](std::size_t) { return data; });
}

// Same, with a fresh slot-swap negative set (one per positive) drawn every epoch.
inline std::vector<double> train_classifier(CoherenceClassifier& clf, const std::vector<StateChange>& positives) {
    const std::uint64_t base = clf.config().seed * 1000003ULL;
    return detail::train_classifier_loop(clf, [&](std::size_t ep) {
        return classifier_dataset(positives, make_negatives(positives, base + ep));
    });
}

// ---------------------------------------------------------------------------
// Reward

enum class RewardForm { LogProb, Prob };

inline constexpr double kProbFloor = 1e-12;

// (sum log p_s) * coherence or (prod p_s) * coherence, with p_s clamped at 1e-12.
inline double reward_value(const std::vector<double>& probs, double coherence, RewardForm form) {
    if (form == RewardForm::LogProb) {
        double s = 0.0;
        for (double p : probs) s += std::log(std::max(p, kProbFloor));
        return s * coherence;
    }
    double prod = 1.0;
    for (double p : probs) prod *= std::max(p, kProbFloor);
    return prod * coherence;
}

// Mean of p1 - p0 over the clauses of y; an unparseable clause counts -1.
inline double coherence_term(const CoherenceClassifier& clf, const std::vector<std::string>& y) {
    const Segmented seg = segment_output(y);
    const std::size_t n = seg.clauses.size() + seg.dropped;
    if (n == 0) return -1.0;
    double total = -static_cast<double>(seg.dropped);
    for (const auto& s : seg.clauses) {
        const auto [p0, p1] = clf.classify(s);
        total += p1 - p0;
    }
    return total / static_cast<double>(n);
}

inline double reward(const CoherenceClassifier& clf, const std::vector<std::string>& y, const std::vector<double>& probs,
                     RewardForm form) {
    return reward_value(probs, coherence_term(clf, y), form);
}

// -(1/t) sum_j R_j log P_j; rewards are constants.
inline Tensor reinforce_loss(const std::vector<Tensor>& log_probs, const std::vector<double>& rewards) {
    if (log_probs.size() != rewards.size() || log_probs.empty()) {
        throw ContractError("reinforce_loss needs one reward per sampled sequence");
    }
    std::vector<Tensor> terms;
    for (std::size_t j = 0; j < log_probs.size(); ++j) terms.push_back(scale(log_probs[j], rewards[j]));
    return scale(sum_scalars(terms), -1.0 / static_cast<double>(log_probs.size()));
}

// log P(y|x) of a generated sequence recomputed under the masks used to sample it.
inline Tensor sequence_log_prob(const DkgedModel& model, const Tensor& X, const Knowledge& k, const Generation& g) {
    if (g.ids.empty()) throw ContractError("empty generation");
    std::vector<std::size_t> in{Vocabulary::bos};
    for (std::size_t i = 0; i + 1 < g.ids.size(); ++i) in.push_back(g.ids[i]);
    const Tensor logits = model.decode(in, routing_kinds(g.tokens), X, k);
    std::vector<double> mask;
    mask.reserve(logits.size());
    for (const auto& m : g.masks) mask.insert(mask.end(), m.begin(), m.end());
    return sum(pick(log_softmax_rows(add_constant(logits, mask)), g.ids));
}

struct RlResult {
    Tensor loss;          // gradient equals the REINFORCE estimator
    double logged = 0.0;  // -mean(R)
    std::vector<double> rewards;
};

inline RlResult rl_loss(const DkgedModel& model, const CoherenceClassifier& clf, const Tensor& X, const Knowledge& k,
                        const ConstrainedVocab& cv, std::size_t samples, RewardForm form, Rng& rng, std::size_t max_len) {
    if (samples < 1) throw ConfigError("RL needs at least one sample per input");
    RlResult r;
    std::vector<Tensor> log_probs;
    for (std::size_t j = 0; j < samples; ++j) {
        Generation g = generate(model, X, k, cv, {true, 1.0}, max_len, &rng);
        r.rewards.push_back(reward(clf, g.tokens, g.probabilities, form));
        log_probs.push_back(sequence_log_prob(model, X, k, g));
    }
    r.loss = reinforce_loss(log_probs, r.rewards);
    double m = 0.0;
    for (double v : r.rewards) m += v;
    r.logged = -m / static_cast<double>(samples);
    return r;
}

}  // namespace kiest
