#pragma once

// Entity state change template, corpus ingestion/cleaning and the synthetic
// corpus generator used for desk-scale experiments.

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kiest/error.hpp"
#include "kiest/kgstore.hpp"
#include "kiest/random.hpp"
#include "kiest/text.hpp"

namespace kiest {

inline constexpr const char* kQuestion = "what happens?";

// (attribute, entity, before_state, after_state); each field is a normalized,
// single-spaced, non-empty token sequence.
struct StateChange {
    std::string attribute;
    std::string entity;
    std::string before;
    std::string after;

    friend auto operator<=>(const StateChange&, const StateChange&) = default;
};

namespace detail {

inline bool contains_token(const std::vector<std::string>& toks, std::string_view t) {
    return std::find(toks.begin(), toks.end(), t) != toks.end();
}

inline bool contains_before_and(const std::vector<std::string>& toks) {
    for (std::size_t i = 0; i + 1 < toks.size(); ++i)
        if (toks[i] == "before" && toks[i + 1] == "and") return true;
    return false;
}

// Empty string when valid, else the violated rule.
inline std::string state_change_violation(const StateChange& sc) {
    const std::pair<const char*, const std::string*> fields[] = {
        {"attribute", &sc.attribute}, {"entity", &sc.entity}, {"before_state", &sc.before}, {"after_state", &sc.after}};
    for (const auto& [label, value] : fields) {
        const auto toks = split_whitespace(*value);
        if (toks.empty()) return std::string("empty ") + label;
        if (contains_before_and(toks)) return std::string(label) + " contains \"before and\"";
        if (contains_token(toks, "afterwards")) return std::string(label) + " contains \"afterwards\"";
    }
    for (const std::string* v : {&sc.attribute, &sc.entity}) {
        const auto toks = split_whitespace(*v);
        if (contains_token(toks, "of") || contains_token(toks, "was")) return "entity/attribute contains \"of\" or \"was\"";
    }
    return {};
}

}  // namespace detail

inline StateChange normalized(const StateChange& sc) {
    return {normalize_text(sc.attribute), normalize_text(sc.entity), normalize_text(sc.before), normalize_text(sc.after)};
}

inline bool is_valid(const StateChange& sc) { return detail::state_change_violation(normalized(sc)).empty(); }

// Splits at the first "of", the first following "was", the first following
// "before and" and a trailing "afterwards".
inline StateChange parse_state_change(std::string_view text) {
    const std::string norm = normalize_text(text);
    const auto toks = split_whitespace(norm);
    auto slice = [&](std::size_t b, std::size_t e) {
        return join(std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(b), toks.begin() + static_cast<std::ptrdiff_t>(e)));
    };
    std::size_t i_of = toks.size();
    for (std::size_t i = 0; i < toks.size(); ++i)
        if (toks[i] == "of") { i_of = i; break; }
    if (i_of == toks.size()) throw MalformedTemplate("missing \"of\"", std::string(text));
    std::size_t i_was = toks.size();
    for (std::size_t i = i_of + 1; i < toks.size(); ++i)
        if (toks[i] == "was") { i_was = i; break; }
    if (i_was == toks.size()) throw MalformedTemplate("missing \"was\"", std::string(text));
    std::size_t i_ba = toks.size();
    for (std::size_t i = i_was + 1; i + 1 < toks.size(); ++i)
        if (toks[i] == "before" && toks[i + 1] == "and") { i_ba = i; break; }
    if (i_ba == toks.size()) throw MalformedTemplate("missing \"before and\"", std::string(text));
    if (toks.back() != "afterwards" || toks.size() - 1 < i_ba + 2) {
        throw MalformedTemplate("missing trailing \"afterwards\"", std::string(text));
    }
    StateChange sc{slice(0, i_of), slice(i_of + 1, i_was), slice(i_was + 1, i_ba), slice(i_ba + 2, toks.size() - 1)};
    if (auto why = detail::state_change_violation(sc); !why.empty()) throw MalformedTemplate(why, std::string(text));
    return sc;
}

inline std::string serialize_state_change(const StateChange& sc) {
    const StateChange n = normalized(sc);
    if (auto why = detail::state_change_violation(n); !why.empty()) throw ContractError("invalid state change: " + why);
    return n.attribute + " of " + n.entity + " was " + n.before + " before and " + n.after + " afterwards";
}

// Canonical clause order: by entity, then attribute.
inline void canonical_sort(std::vector<StateChange>& scs) {
    std::sort(scs.begin(), scs.end(), [](const StateChange& a, const StateChange& b) {
        return std::tie(a.entity, a.attribute, a.before, a.after) < std::tie(b.entity, b.attribute, b.before, b.after);
    });
}

// ---------------------------------------------------------------------------
// Corpus records

struct Example {
    std::string id;
    std::vector<std::string> context;  // history action sentences, in order
    std::string query;                 // ends with "what happens?"
    std::vector<StateChange> gold;
};

// Whole-word, case-insensitive spelling corrections (wrong -> right).
using SpellingMap = std::map<std::string, std::string>;

inline SpellingMap parse_spelling_map(std::istream& in) {
    SpellingMap m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (collapse_whitespace(line).empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw ParseError("spelling map needs wrong<TAB>right", lineno);
        m[normalize_text(line.substr(0, tab))] = normalize_text(line.substr(tab + 1));
    }
    return m;
}

inline SpellingMap load_spelling_map(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open spelling map " + path);
    return parse_spelling_map(f);
}

inline std::string apply_spelling(std::string_view text, const SpellingMap& map) {
    if (map.empty()) return std::string(text);
    std::vector<std::string> words = split_whitespace(text);
    for (auto& w : words) {
        std::size_t b = 0, e = w.size();
        while (b < e && is_split_punct(w[b])) ++b;
        while (e > b && is_split_punct(w[e - 1])) --e;
        auto it = map.find(to_lower_ascii(w.substr(b, e - b)));
        if (it != map.end()) w = w.substr(0, b) + it->second + w.substr(e);
    }
    return join(words);
}

inline std::string normalize_query(std::string_view q) {
    std::string n = normalize_text(q);
    const std::string question = kQuestion;
    if (n.size() >= question.size() && n.compare(n.size() - question.size(), question.size(), question) == 0) return n;
    return n.empty() ? question : n + " " + question;
}

// Token sequence of x = (x_c, x_q). max_context_sentences < 0 keeps all.
inline std::vector<std::string> input_tokens(const Example& ex, int max_context_sentences = -1) {
    std::vector<std::string> out;
    std::size_t first = 0;
    if (max_context_sentences >= 0 && ex.context.size() > static_cast<std::size_t>(max_context_sentences))
        first = ex.context.size() - static_cast<std::size_t>(max_context_sentences);
    for (std::size_t i = first; i < ex.context.size(); ++i) {
        auto t = tokenize(ex.context[i]);
        out.insert(out.end(), t.begin(), t.end());
    }
    auto q = tokenize(ex.query);
    out.insert(out.end(), q.begin(), q.end());
    return out;
}

struct RejectedRecord {
    std::size_t line = 0;
    std::string reason;
};

struct LoadReport {
    std::vector<RejectedRecord> rejected_lines;
    std::vector<std::string> malformed_clauses;
    std::size_t accepted_clauses = 0;
    std::size_t input_clauses = 0;
};

struct CorpusLoad {
    std::vector<Example> examples;
    LoadReport report;
};

// Field names of one external corpus release.
struct FieldMapping {
    std::string id = "id";
    std::string context = "context";
    std::string query = "query";
    std::string state_changes = "state_changes";
};

inline CorpusLoad parse_corpus(std::istream& in, const SpellingMap& spelling = {}, const FieldMapping& fields = {}) {
    using nlohmann::json;
    CorpusLoad out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (collapse_whitespace(line).empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            out.report.rejected_lines.push_back({lineno, std::string("invalid JSON: ") + e.what()});
            continue;
        }
        if (!rec.is_object() || !rec.contains(fields.id) || !rec.contains(fields.query)) {
            out.report.rejected_lines.push_back({lineno, "record lacks id or query"});
            continue;
        }
        try {
            Example ex;
            ex.id = rec[fields.id].is_string() ? rec[fields.id].get<std::string>() : rec[fields.id].dump();
            if (rec.contains(fields.context)) {
                const auto& c = rec[fields.context];
                if (c.is_array()) {
                    for (const auto& s : c) ex.context.push_back(normalize_text(apply_spelling(s.get<std::string>(), spelling)));
                } else if (c.is_string() && !collapse_whitespace(c.get<std::string>()).empty()) {
                    ex.context.push_back(normalize_text(apply_spelling(c.get<std::string>(), spelling)));
                }
            }
            ex.query = normalize_query(apply_spelling(rec[fields.query].get<std::string>(), spelling));
            if (rec.contains(fields.state_changes)) {
                for (const auto& s : rec[fields.state_changes]) {
                    ++out.report.input_clauses;
                    const std::string text = apply_spelling(s.get<std::string>(), spelling);
                    try {
                        ex.gold.push_back(parse_state_change(text));
                        ++out.report.accepted_clauses;
                    } catch (const MalformedTemplate&) {
                        out.report.malformed_clauses.push_back(text);
                    }
                }
            }
            canonical_sort(ex.gold);
            out.examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            out.report.rejected_lines.push_back({lineno, std::string("bad field type: ") + e.what()});
        }
    }
    return out;
}

inline CorpusLoad load_corpus(const std::string& path, const SpellingMap& spelling = {}, const FieldMapping& fields = {}) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open corpus " + path);
    return parse_corpus(f, spelling, fields);
}

inline std::string example_to_json_line(const Example& ex) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["context"] = ex.context;
    j["query"] = ex.query;
    j["state_changes"] = nlohmann::ordered_json::array();
    for (const auto& sc : ex.gold) j["state_changes"].push_back(serialize_state_change(sc));
    return j.dump();
}

inline void save_corpus(const std::vector<Example>& examples, std::ostream& out) {
    for (const auto& ex : examples) out << example_to_json_line(ex) << '\n';
}

inline void save_corpus(const std::vector<Example>& examples, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write corpus " + path);
    save_corpus(examples, f);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticSpec {
    std::size_t size = 50;
    std::size_t frames = 16;             // verb/attribute families, at most kFrameCount
    std::size_t max_clauses = 1;          // state changes per example, 1..2
    std::size_t distractor_entities = 2;  // other-family entities linked to each object
    std::size_t noise_per_object = 2;
    std::size_t context_sentences = 1;
    bool knowledge_dependent = true;
    std::uint64_t seed = 7;
};

struct SyntheticFrame {
    const char* verb;
    const char* attribute;
    const char* before;
    const char* after;
    const char* entities[3];
};

inline constexpr SyntheticFrame kFrames[] = {
    {"cut", "length", "longer", "shorter", {"knife", "blade", "scissors"}},
    {"wash", "cleanness", "dirty", "clean", {"sponge", "soap", "towel"}},
    {"heat", "temperature", "cold", "hot", {"stove", "pan", "kettle"}},
    {"fold", "shape", "flat", "folded", {"paper", "cloth", "napkin"}},
    {"paint", "color", "plain", "colored", {"brush", "roller", "canvas"}},
    {"fill", "fullness", "empty", "full", {"bucket", "jug", "bottle"}},
    {"open", "openness", "closed", "open", {"lid", "door", "latch"}},
    {"shake", "mixture", "separated", "mixed", {"shaker", "jar", "blender"}},
    {"press", "flatness", "bumpy", "smooth", {"iron", "plate", "board"}},
    {"dry", "wetness", "wet", "dry", {"fan", "rack", "dryer"}},
    {"light", "brightness", "dark", "bright", {"lamp", "candle", "match"}},
    {"tie", "tightness", "loose", "tight", {"rope", "string", "lace"}},
    {"plant", "growth", "bare", "sprouted", {"seed", "soil", "pot"}},
    {"sharpen", "sharpness", "dull", "sharp", {"stone", "file", "grinder"}},
    {"freeze", "hardness", "liquid", "solid", {"freezer", "tray", "ice"}},
    {"wrap", "coverage", "exposed", "covered", {"foil", "blanket", "sheet"}},
};
inline constexpr std::size_t kFrameCount = sizeof(kFrames) / sizeof(kFrames[0]);

inline constexpr const char* kNoiseConcepts[] = {"rich", "coach", "energy", "placement", "hand", "position",
                                                 "muscle", "body", "money", "weather", "music", "friend"};
inline constexpr const char* kFillerSentences[] = {"you walk into the kitchen .", "you gather the supplies .",
                                                   "you clear the table .", "you check the room .",
                                                   "you find a quiet spot ."};

struct SyntheticCorpus {
    std::vector<Example> examples;
    KnowledgeGraph kg;
};

namespace detail {

// Pronounceable lowercase pseudo-word, e.g. "tovazel".
inline std::string pseudo_word(Rng& rng) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "gl", "tr", "qu"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "oo"};
    static const char* codas[] = {"", "n", "l", "r", "x", "m", "sk"};
    std::uniform_int_distribution<std::size_t> o(0, std::size(onsets) - 1), v(0, std::size(vowels) - 1),
        c(0, std::size(codas) - 1), syl(2, 3);
    std::string w;
    const std::size_t n = syl(rng);
    for (std::size_t i = 0; i < n; ++i) w += std::string(onsets[o(rng)]) + vowels[v(rng)];
    return w + codas[c(rng)];
}

}  // namespace detail

// Procedurally generated corpus with a matching concept graph. In the
// knowledge-dependent setting the gold entity never occurs in the text and
// is linked (1 hop) to the action's object; the attribute hangs off the verb.
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
    if (spec.size < 1) throw ContractError("synthetic corpus size must be >= 1");
    if (spec.frames < 1 || spec.frames > kFrameCount) throw ConfigError("synthetic frames must be in [1, " + std::to_string(kFrameCount) + "]");
    if (spec.max_clauses < 1 || spec.max_clauses > 2) throw ConfigError("synthetic max_clauses must be 1 or 2");
    Rng rng(spec.seed);
    SyntheticCorpus out;
    KnowledgeGraph& kg = out.kg;

    std::set<std::string> reserved;
    for (std::size_t f = 0; f < kFrameCount; ++f) {
        const auto& fr = kFrames[f];
        for (const char* w : {fr.verb, fr.attribute, fr.before, fr.after}) reserved.insert(w);
        for (const char* e : fr.entities) reserved.insert(e);
    }
    for (const char* w : kNoiseConcepts) reserved.insert(w);
    for (const char* s : kFillerSentences)
        for (auto& t : tokenize(s)) reserved.insert(t);
    for (const char* w : {"you", "the", "person", "now", "what", "happens", "carefully", "and", "of", "was", "before", "afterwards"})
        reserved.insert(w);

    // Frame-level knowledge: verb -> attribute, entity -> attribute, hub edges.
    for (std::size_t f = 0; f < spec.frames; ++f) {
        const auto& fr = kFrames[f];
        kg.add_edge(fr.verb, "HasProperty", fr.attribute);
        for (const char* e : fr.entities) kg.add_edge(e, "HasProperty", fr.attribute);
    }
    kg.add_edge("you", "IsA", "person");
    kg.add_edge("person", "HasA", "body");
    kg.add_edge("person", "CapableOf", "coach");
    kg.add_edge("body", "HasA", "muscle");
    kg.add_edge("body", "HasA", "hand");
    for (const char* s : kFillerSentences) {
        auto toks = tokenize(s);
        const std::string noun = toks[toks.size() - 2];
        kg.add_edge(noun, "AtLocation", "position");
    }

    std::uniform_int_distribution<std::size_t> pick_frame(0, spec.frames - 1), pick_entity(0, 2),
        pick_noise(0, std::size(kNoiseConcepts) - 1), pick_filler(0, std::size(kFillerSentences) - 1),
        pick_clauses(1, spec.max_clauses);

    std::set<std::string> used_objects;
    auto fresh_object = [&]() {
        for (;;) {
            std::string w = detail::pseudo_word(rng);
            if (!reserved.count(w) && used_objects.insert(w).second) return w;
        }
    };

    for (std::size_t n = 0; n < spec.size; ++n) {
        Example ex;
        ex.id = "syn-" + std::to_string(n);
        for (std::size_t c = 0; c < spec.context_sentences; ++c) ex.context.push_back(kFillerSentences[pick_filler(rng)]);
        const std::size_t clauses = pick_clauses(rng);
        std::vector<std::size_t> frames_used;
        std::vector<std::string> parts;
        for (std::size_t c = 0; c < clauses; ++c) {
            if (frames_used.size() == spec.frames) break;
            std::size_t f = pick_frame(rng);
            while (std::find(frames_used.begin(), frames_used.end(), f) != frames_used.end()) f = (f + 1) % spec.frames;
            frames_used.push_back(f);
            const auto& fr = kFrames[f];
            const std::string entity = fr.entities[pick_entity(rng)];
            std::string object = entity;
            if (spec.knowledge_dependent) {
                object = fresh_object();
                kg.add_edge(object, "RelatedTo", entity);
                for (std::size_t d = 0; d < spec.distractor_entities && spec.frames > 1; ++d) {
                    std::size_t g = pick_frame(rng);
                    if (g == f) g = (g + 1) % spec.frames;
                    kg.add_edge(object, "RelatedTo", kFrames[g].entities[pick_entity(rng)]);
                }
                for (std::size_t k = 0; k < spec.noise_per_object; ++k)
                    kg.add_edge(object, "RelatedTo", kNoiseConcepts[pick_noise(rng)]);
            }
            parts.push_back(std::string(fr.verb) + " the " + object);
            ex.gold.push_back({fr.attribute, entity, fr.before, fr.after});
        }
        ex.query = "you " + join(parts, " and ") + " carefully . now , " + kQuestion;
        canonical_sort(ex.gold);
        out.examples.push_back(std::move(ex));
    }
    return out;
}

inline nlohmann::ordered_json provenance_json(const SyntheticSpec& spec) {
    nlohmann::ordered_json j;
    j["seed"] = spec.seed;
    j["size"] = spec.size;
    j["frames"] = spec.frames;
    j["max_clauses"] = spec.max_clauses;
    j["distractor_entities"] = spec.distractor_entities;
    j["noise_per_object"] = spec.noise_per_object;
    j["context_sentences"] = spec.context_sentences;
    j["knowledge_dependent"] = spec.knowledge_dependent;
    return j;
}

}  // namespace kiest
