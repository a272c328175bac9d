#pragma once

// Constrained generation under template-slot control.

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "kiest/corpus.hpp"
#include "kiest/seqmodel.hpp"

namespace kiest {

// Surface forms made only of [a-z0-9'’ -].
inline bool symbol_clean(std::string_view tok) {
    if (tok.empty()) return false;
    for (std::size_t i = 0; i < tok.size(); ++i) {
        const unsigned char c = static_cast<unsigned char>(tok[i]);
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'' || c == ' ' || c == '-') continue;
        if (c == 0xE2 && i + 2 < tok.size() && static_cast<unsigned char>(tok[i + 1]) == 0x80 &&
            static_cast<unsigned char>(tok[i + 2]) == 0x99) {
            i += 2;
            continue;
        }
        return false;
    }
    return true;
}

struct ConstrainedVocab {
    double gamma = 0.4;
    std::vector<bool> allowed;     // by token id
    std::vector<bool> always;      // template tokens, SEP, EOS, BOS
    std::vector<double> relevance; // xi by token id

    std::size_t allowed_count() const { return static_cast<std::size_t>(std::count(allowed.begin(), allowed.end(), true)); }
    std::vector<std::size_t> allowed_ids() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < allowed.size(); ++i)
            if (allowed[i]) out.push_back(i);
        return out;
    }
};

// Symbol filter, then xi > gamma against the source tokens; gamma <= 0 keeps
// every symbol-clean token. Always-allowed tokens are added last.
inline ConstrainedVocab build_constrained_vocab(const std::vector<std::size_t>& source_ids, const Vocabulary& vocab,
                                                const Tensor& embeddings, double gamma) {
    if (gamma > 1.0) throw ConfigError("gamma must be <= 1, got " + std::to_string(gamma));
    ConstrainedVocab cv;
    cv.gamma = gamma;
    const std::size_t n = vocab.size();
    cv.allowed.assign(n, false);
    cv.always.assign(n, false);
    cv.relevance.assign(n, -1.0);
    const std::size_t d = embeddings.cols();
    auto row = [&](std::size_t id) { return embeddings.data().subspan(id * d, d); };
    for (std::size_t id = 0; id < n; ++id) {
        double xi = -1.0;
        for (auto s : source_ids) xi = std::max(xi, cosine_similarity(row(id), row(s)));
        cv.relevance[id] = xi;
        if (!symbol_clean(vocab.token(id))) continue;
        if (gamma <= 0.0 || xi > gamma) cv.allowed[id] = true;
    }
    for (std::size_t id : {Vocabulary::bos, Vocabulary::eos, Vocabulary::sep}) cv.always[id] = true;
    for (const char* t : kTemplateTokens) cv.always[vocab.id(t)] = true;
    for (std::size_t id = 0; id < n; ++id)
        if (cv.always[id]) cv.allowed[id] = true;
    return cv;
}

// Ids legal at the next position given the clause state, intersected with cv.
inline std::vector<std::size_t> legal_next(const ClauseTracker& t, const ConstrainedVocab& cv, const Vocabulary& vocab) {
    using P = ClauseTracker::Phase;
    std::vector<std::size_t> out;
    auto content = [&]() {
        for (std::size_t id = 0; id < cv.allowed.size(); ++id)
            if (cv.allowed[id] && !Vocabulary::is_reserved(id) && !vocab.is_template(id)) out.push_back(id);
    };
    switch (t.phase()) {
        case P::Finished: break;
        case P::Closed:
            out = {Vocabulary::eos, Vocabulary::sep};
            break;
        case P::Attribute:
        case P::Entity:
            content();
            if (t.content() > 0) out.push_back(vocab.id(t.phase() == P::Attribute ? "of" : "was"));
            break;
        case P::Before:
            if (t.pending_before()) {
                out.push_back(vocab.id("and"));
                break;
            }
            content();
            if (t.content() > 0) out.push_back(vocab.id("before"));
            break;
        case P::After:
            content();
            if (t.content() > 0) out.push_back(vocab.id("afterwards"));
            break;
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Additive logit mask: 0 on legal ids, kMaskedLogit elsewhere.
inline std::vector<double> legal_mask(const std::vector<std::size_t>& legal, std::size_t vocab_size) {
    std::vector<double> m(vocab_size, kMaskedLogit);
    for (auto id : legal) m[id] = 0.0;
    return m;
}

// Softmax of logits/temperature restricted to `legal` (in that order).
inline std::vector<double> masked_distribution(const Tensor& logits, const std::vector<std::size_t>& legal,
                                               double temperature = 1.0) {
    std::vector<double> z(legal.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < legal.size(); ++i) {
        z[i] = logits[legal[i]] / temperature;
        mx = std::max(mx, z[i]);
    }
    double total = 0.0;
    for (auto& v : z) {
        v = std::exp(v - mx);
        total += v;
    }
    for (auto& v : z) v /= total;
    return z;
}

struct DecodeMode {
    bool sample = false;
    double temperature = 1.0;
};

struct Generation {
    std::vector<std::size_t> ids;           // without BOS, with EOS when reached
    std::vector<std::string> tokens;
    std::vector<double> probabilities;      // chosen-token probability per step
    std::vector<std::vector<double>> masks; // additive mask used at each step
    std::vector<std::string> warnings;
    bool degenerate = false;
};

inline Generation generate(const DkgedModel& model, const Tensor& X, const Knowledge& k, const ConstrainedVocab& cv,
                           DecodeMode mode, std::size_t max_len, Rng* rng = nullptr) {
    if (max_len < 1) throw ContractError("max_len must be >= 1");
    if (mode.sample && !rng) throw ContractError("sampling mode needs an RNG");
    if (mode.sample && !(mode.temperature > 0.0)) throw ConfigError("temperature must be > 0");
    NoGradGuard ng;
    const Vocabulary& vocab = model.vocab();
    const std::size_t steps = std::min(max_len, model.config().max_tgt_len);
    Generation g;
    ClauseTracker tracker;
    for (std::size_t step = 0; step < steps; ++step) {
        const auto legal = legal_next(tracker, cv, vocab);
        std::size_t chosen = Vocabulary::eos;
        double p = 1.0;
        std::vector<double> mask;
        if (legal.empty()) {
            g.degenerate = true;
            g.warnings.push_back("no legal token at step " + std::to_string(step) + "; emitting <eos>");
            mask = legal_mask({Vocabulary::eos}, vocab.size());
        } else {
            mask = legal_mask(legal, vocab.size());
            const Tensor logits = model.decoder_step(g.ids, X, k, tracker.kind());
            const auto z = masked_distribution(logits, legal, mode.sample ? mode.temperature : 1.0);
            std::size_t pick = 0;
            if (mode.sample) {
                std::discrete_distribution<std::size_t> dist(z.begin(), z.end());
                pick = dist(*rng);
            } else {
                for (std::size_t i = 1; i < z.size(); ++i)
                    if (z[i] > z[pick]) pick = i;
            }
            chosen = legal[pick];
            p = z[pick];
        }
        g.ids.push_back(chosen);
        g.tokens.push_back(vocab.token(chosen));
        g.probabilities.push_back(p);
        g.masks.push_back(std::move(mask));
        if (chosen == Vocabulary::eos) break;
        tracker.feed(vocab.token(chosen));
    }
    return g;
}

struct Segmented {
    std::vector<StateChange> clauses;
    std::size_t dropped = 0;
};

// Splits on <sep> and parses each clause; unparseable clauses are counted.
inline Segmented segment_output(const std::vector<std::string>& tokens) {
    Segmented out;
    std::vector<std::vector<std::string>> chunks(1);
    for (const auto& t : tokens) {
        if (t == kBos) continue;
        if (t == kEos) break;
        if (t == kSep) {
            chunks.emplace_back();
            continue;
        }
        chunks.back().push_back(t);
    }
    if (chunks.size() == 1 && chunks[0].empty()) return out;
    for (const auto& c : chunks) {
        try {
            out.clauses.push_back(parse_state_change(join(c)));
        } catch (const MalformedTemplate&) {
            ++out.dropped;
        }
    }
    return out;
}

inline nlohmann::ordered_json state_change_json(const StateChange& s) {
    nlohmann::ordered_json j;
    j["attribute"] = s.attribute;
    j["entity"] = s.entity;
    j["before"] = s.before;
    j["after"] = s.after;
    return j;
}

inline std::string generation_json_line(const std::string& example_id, const std::vector<std::string>& raw,
                                        const Segmented& seg) {
    nlohmann::ordered_json j;
    j["example_id"] = example_id;
    j["raw_tokens"] = raw;
    j["state_changes"] = nlohmann::ordered_json::array();
    for (const auto& s : seg.clauses) j["state_changes"].push_back(state_change_json(s));
    j["dropped_clauses"] = seg.dropped;
    return j.dump();
}

}  // namespace kiest
