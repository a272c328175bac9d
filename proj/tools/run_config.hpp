#pragma once

// Run configuration: one JSON document with a section per stage. Defaults come
// from the library structs, the file overrides them, command-line flags
// override the file. The merged document is what manifests record.

#include <fstream>
#include <functional>
#include <map>
#include <string>

#include "json.hpp"

#include "kiest/coherence.hpp"
#include "kiest/corpus.hpp"
#include "kiest/pipeline.hpp"
#include "kiest/selector.hpp"
#include "kiest/seqmodel.hpp"
#include "kiest/trainer.hpp"

namespace kiest::cli {

using json = nlohmann::ordered_json;

inline const char* reward_form_name(RewardForm f) { return f == RewardForm::LogProb ? "logprob" : "prob"; }

inline RewardForm reward_form_from(const std::string& s) {
    if (s == "logprob") return RewardForm::LogProb;
    if (s == "prob") return RewardForm::Prob;
    throw ConfigError("reward form must be logprob or prob; got " + s);
}

inline const char* knowledge_mode_name(KnowledgeMode m) {
    return m == KnowledgeMode::Selected ? "selected" : m == KnowledgeMode::None ? "none" : "raw";
}

struct RunConfig {
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    SyntheticSpec synthetic;
    PrepareConfig prepare;
    SelectorConfig selector;
    ClassifierConfig classifier;
    ModelConfig model;
    TrainConfig train;
};

inline json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    const auto& s = c.synthetic;
    j["synthetic"] = {{"size", s.size}, {"frames", s.frames}, {"max_clauses", s.max_clauses},
                      {"distractor_entities", s.distractor_entities}, {"noise_per_object", s.noise_per_object},
                      {"context_sentences", s.context_sentences}, {"knowledge_dependent", s.knowledge_dependent},
                      {"seed", s.seed}};
    const auto& p = c.prepare;
    j["prepare"] = {{"hops", p.hops}, {"max_ngram", p.max_ngram}, {"epsilon", p.epsilon},
                    {"mode", knowledge_mode_name(p.mode)}, {"max_context_sentences", p.max_context_sentences}};
    const auto& e = c.selector;
    j["selector"] = {{"embed_dim", e.embed_dim}, {"out_dim", e.out_dim}, {"margin", e.margin},
                     {"epochs", e.epochs}, {"lr", e.lr}, {"weight_decay", e.weight_decay}, {"seed", e.seed},
                     {"max_entities", e.max_entities}, {"max_attributes", e.max_attributes}};
    const auto& k = c.classifier;
    j["classifier"] = {{"d_model", k.d_model}, {"n_heads", k.n_heads}, {"d_ff", k.d_ff}, {"n_layers", k.n_layers},
                       {"max_len", k.max_len}, {"dropout", k.dropout}, {"epochs", k.epochs}, {"batch", k.batch},
                       {"lr", k.lr}, {"weight_decay", k.weight_decay}, {"seed", k.seed}};
    j["model"] = json::parse(model_config_json(c.model).dump());
    const auto& t = c.train;
    j["train"] = {{"lr_model", t.lr_model}, {"batch_model", t.batch_model}, {"label_smoothing", t.label_smoothing},
                  {"lambda", t.lambda}, {"clip_norm", t.clip_norm}, {"weight_decay", t.weight_decay},
                  {"epochs", t.epochs}, {"seed", t.seed}, {"rl_start_epoch", t.rl_start_epoch},
                  {"rl_samples", t.rl_samples}, {"reward_form", reward_form_name(t.reward_form)},
                  {"patience", t.patience}, {"eval_every", t.eval_every}, {"eval_train", t.eval_train},
                  {"target_train_exact", t.target_train_exact}, {"gamma", t.gamma}, {"max_gen_len", t.max_gen_len}};
    return j;
}

namespace detail {

template <class T>
void take(const json& sec, const std::string& where, const char* key, T& field) {
    if (!sec.contains(key)) return;
    try {
        field = sec.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline void check_keys(const json& sec, const std::string& where, const json& known) {
    if (!sec.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [k, v] : sec.items())
        if (!known.contains(k)) throw ConfigError("unknown config key " + where + "." + k);
}

}  // namespace detail

// Fields absent from `j` keep their defaults. Section seeds default to the
// top-level seed.
inline RunConfig from_json(const json& j) {
    RunConfig c;
    const json known = to_json(c);
    detail::check_keys(j, "config", known);
    detail::take(j, "config", "seed", c.seed);
    detail::take(j, "config", "threads", c.threads);
    c.synthetic.seed = c.selector.seed = c.classifier.seed = c.model.seed = c.train.seed = c.seed;
    auto section = [&](const char* name) {
        static const json empty = json::object();
        if (!j.contains(name)) return std::cref(empty);
        detail::check_keys(j.at(name), name, known.at(name));
        return std::cref(j.at(name));
    };
    {
        const json& s = section("synthetic");
        auto& o = c.synthetic;
        detail::take(s, "synthetic", "size", o.size);
        detail::take(s, "synthetic", "frames", o.frames);
        detail::take(s, "synthetic", "max_clauses", o.max_clauses);
        detail::take(s, "synthetic", "distractor_entities", o.distractor_entities);
        detail::take(s, "synthetic", "noise_per_object", o.noise_per_object);
        detail::take(s, "synthetic", "context_sentences", o.context_sentences);
        detail::take(s, "synthetic", "knowledge_dependent", o.knowledge_dependent);
        detail::take(s, "synthetic", "seed", o.seed);
    }
    {
        const json& s = section("prepare");
        auto& o = c.prepare;
        detail::take(s, "prepare", "hops", o.hops);
        detail::take(s, "prepare", "max_ngram", o.max_ngram);
        detail::take(s, "prepare", "epsilon", o.epsilon);
        std::string mode = knowledge_mode_name(o.mode);
        detail::take(s, "prepare", "mode", mode);
        o.mode = knowledge_mode_from(mode);
        detail::take(s, "prepare", "max_context_sentences", o.max_context_sentences);
        if (o.hops < 1) throw ConfigError("prepare.hops must be >= 1");
        if (!(o.epsilon >= 0.0 && o.epsilon <= 1.0)) throw ConfigError("prepare.epsilon must be in [0, 1]");
    }
    {
        const json& s = section("selector");
        auto& o = c.selector;
        detail::take(s, "selector", "embed_dim", o.embed_dim);
        detail::take(s, "selector", "out_dim", o.out_dim);
        detail::take(s, "selector", "margin", o.margin);
        detail::take(s, "selector", "epochs", o.epochs);
        detail::take(s, "selector", "lr", o.lr);
        detail::take(s, "selector", "weight_decay", o.weight_decay);
        detail::take(s, "selector", "seed", o.seed);
        detail::take(s, "selector", "max_entities", o.max_entities);
        detail::take(s, "selector", "max_attributes", o.max_attributes);
    }
    {
        const json& s = section("classifier");
        auto& o = c.classifier;
        detail::take(s, "classifier", "d_model", o.d_model);
        detail::take(s, "classifier", "n_heads", o.n_heads);
        detail::take(s, "classifier", "d_ff", o.d_ff);
        detail::take(s, "classifier", "n_layers", o.n_layers);
        detail::take(s, "classifier", "max_len", o.max_len);
        detail::take(s, "classifier", "dropout", o.dropout);
        detail::take(s, "classifier", "epochs", o.epochs);
        detail::take(s, "classifier", "batch", o.batch);
        detail::take(s, "classifier", "lr", o.lr);
        detail::take(s, "classifier", "weight_decay", o.weight_decay);
        detail::take(s, "classifier", "seed", o.seed);
    }
    {
        const json& s = section("model");
        const std::uint64_t seed = c.model.seed;
        try {
            c.model = model_config_from_json(nlohmann::json::parse(s.dump()));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("model: ") + e.what());
        }
        if (!s.contains("seed")) c.model.seed = seed;
    }
    {
        const json& s = section("train");
        auto& o = c.train;
        detail::take(s, "train", "lr_model", o.lr_model);
        detail::take(s, "train", "batch_model", o.batch_model);
        detail::take(s, "train", "label_smoothing", o.label_smoothing);
        detail::take(s, "train", "lambda", o.lambda);
        detail::take(s, "train", "clip_norm", o.clip_norm);
        detail::take(s, "train", "weight_decay", o.weight_decay);
        detail::take(s, "train", "epochs", o.epochs);
        detail::take(s, "train", "seed", o.seed);
        detail::take(s, "train", "rl_start_epoch", o.rl_start_epoch);
        detail::take(s, "train", "rl_samples", o.rl_samples);
        std::string form = reward_form_name(o.reward_form);
        detail::take(s, "train", "reward_form", form);
        o.reward_form = reward_form_from(form);
        detail::take(s, "train", "patience", o.patience);
        detail::take(s, "train", "eval_every", o.eval_every);
        detail::take(s, "train", "eval_train", o.eval_train);
        detail::take(s, "train", "target_train_exact", o.target_train_exact);
        detail::take(s, "train", "gamma", o.gamma);
        detail::take(s, "train", "max_gen_len", o.max_gen_len);
        validate(o);
        if (o.gamma > 1.0) throw ConfigError("train.gamma must be <= 1");
    }
    return c;
}

inline json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    try {
        return json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
}

// Sets section.key (or a top-level key when section is empty) in `doc`.
inline void override(json& doc, const std::string& section, const std::string& key, json value) {
    if (section.empty()) {
        doc[key] = std::move(value);
        return;
    }
    if (!doc.contains(section)) doc[section] = json::object();
    doc[section][key] = std::move(value);
}

// A spec file is either a whole run config or just the synthetic section.
inline json config_from_spec(const std::string& path, const json& base) {
    json spec = read_json_file(path);
    if (!spec.is_object()) throw ConfigError("spec " + path + " must be a JSON object");
    json doc = base;
    if (spec.contains("synthetic") || spec.contains("seed")) {
        for (const auto& [k, v] : spec.items()) doc[k] = v;
    } else {
        for (const auto& [k, v] : spec.items()) doc["synthetic"][k] = v;
    }
    return doc;
}

}  // namespace kiest::cli
