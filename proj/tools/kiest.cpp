// kiest: batch command-line driver for graph building, synthetic data,
// selector/classifier/model training, generation, evaluation and sweeps.
//
// Exit codes: 0 success, 1 contract or usage error, 2 I/O error,
// 3 verification failure. Errors are one JSON line on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "kiest/coherence.hpp"
#include "kiest/corpus.hpp"
#include "kiest/gradsuite.hpp"
#include "kiest/kgstore.hpp"
#include "kiest/parallel.hpp"
#include "kiest/pipeline.hpp"
#include "kiest/selector.hpp"
#include "kiest/sweep.hpp"
#include "kiest/trainer.hpp"
#include "manifest.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace kiest;
using namespace kiest::cli;

namespace {

// Options every subcommand accepts, plus the flag -> config-key overrides.
struct Common {
    std::string config_path;
    std::vector<std::function<void(json&)>> overrides;
    std::vector<std::string> argv;

    RunConfig resolve(json* snapshot = nullptr) const {
        json doc = config_path.empty() ? json::object() : read_json_file(config_path);
        for (const auto& o : overrides) o(doc);
        RunConfig c = from_json(doc);
        if (snapshot) *snapshot = to_json(c);
        return c;
    }
};

template <class T>
void flag_override(CLI::App* sub, Common& common, const std::string& flag, const std::string& section,
                   const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = sub->add_option(flag, *value, help);
    common.overrides.push_back([=](json& doc) {
        if (opt->count() > 0) override(doc, section, key, *value);
    });
}

void bool_override(CLI::App* sub, Common& common, const std::string& flag, const std::string& section,
                   const std::string& key, const std::string& help) {
    CLI::Option* opt = sub->add_flag(flag, help);
    common.overrides.push_back([=](json& doc) {
        if (opt->count() > 0) override(doc, section, key, true);
    });
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "JSON run config (flags override it)");
    flag_override<std::uint64_t>(sub, c, "--seed", "", "seed", "Top-level seed; section seeds default to it");
    flag_override<std::size_t>(sub, c, "--threads", "", "threads", "Workers for selection, generation and evaluation");
}

void add_prepare_flags(CLI::App* sub, Common& c) {
    flag_override<double>(sub, c, "--epsilon", "prepare", "epsilon", "Selection threshold on (1+cos)/2");
    flag_override<std::size_t>(sub, c, "--hops", "prepare", "hops", "Retrieval depth H");
    flag_override<std::string>(sub, c, "--mode", "prepare", "mode", "Knowledge mode: selected, none or raw");
}

void add_train_flags(CLI::App* sub, Common& c) {
    flag_override<double>(sub, c, "--lambda", "train", "lambda", "Weight of the RL loss, in [0, 1]");
    flag_override<double>(sub, c, "--gamma", "train", "gamma", "Decoding relevance threshold, <= 1");
    bool_override(sub, c, "--fuse-with-source", "model", "fuse_with_source",
                  "Concatenate the source context into the knowledge attention input");
    flag_override<std::string>(sub, c, "--reward-form", "train", "reward_form", "RL reward: logprob or prob");
    flag_override<std::size_t>(sub, c, "--epochs", "train", "epochs", "Training epochs");
    flag_override<double>(sub, c, "--lr", "train", "lr_model", "Model learning rate");
    flag_override<std::size_t>(sub, c, "--rl-start-epoch", "train", "rl_start_epoch",
                               "First epoch with the RL loss (0: none, or half way when a classifier is given)");
}

std::vector<Example> read_examples(const std::string& path) {
    CorpusLoad load = load_corpus(path);
    if (!load.report.rejected_lines.empty() || !load.report.malformed_clauses.empty())
        std::cerr << "warning: " << path << ": " << load.report.rejected_lines.size() << " rejected lines, "
                  << load.report.malformed_clauses.size() << " malformed clauses\n";
    return std::move(load.examples);
}

struct Selectors {
    std::optional<SelectorModel> entity, attribute;
    const SelectorModel* e() const { return entity ? &*entity : nullptr; }
    const SelectorModel* a() const { return attribute ? &*attribute : nullptr; }
};

Selectors read_selectors(const std::string& dir, Manifest* m) {
    Selectors s;
    if (dir.empty()) return s;
    const std::string e = (fs::path(dir) / "entity.sel").string(), a = (fs::path(dir) / "attribute.sel").string();
    s.entity.emplace(SelectorModel::load(e));
    s.attribute.emplace(SelectorModel::load(a));
    if (m) {
        m->input("entity_selector", e);
        m->input("attribute_selector", a);
    }
    return s;
}

std::string in_dir(const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    return (fs::path(dir) / name).string();
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

json prf_json(const Prf& p) { return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}}; }

json report_json(const EvalReport& r) {
    json j;
    for (Overlap o : kAllOverlaps) j[overlap_name(o)] = prf_json(r.at(o));
    j["examples"] = r.examples;
    j["predictions"] = r.predictions;
    j["golds"] = r.golds;
    return j;
}

// ---------------------------------------------------------------------------

int cmd_build_kg(const std::string& edges, const std::string& out, const Common& common) {
    json snap;
    common.resolve(&snap);
    const KnowledgeGraph kg = load_graph(edges);
    json stats{{"nodes", kg.concept_count()},
               {"edges", kg.edge_count()},
               {"relations", kg.relations()},
               {"max_concept_tokens", kg.max_concept_tokens()}};
    if (!out.empty()) {
        write_file(out, export_graph(kg));
        Manifest m("build-kg", common.argv);
        m.config(snap);
        m.input("edges", edges);
        m.output("graph", out);
        m.note("stats", stats);
        m.write(out + ".manifest.json");
    }
    print_json(stats);
    return 0;
}

int cmd_make_synthetic(const std::string& spec_path, const std::string& out_dir, double dev_fraction,
                       const Common& common) {
    json snap;
    RunConfig c = common.resolve(&snap);
    if (!spec_path.empty()) {
        json doc = config_from_spec(spec_path, snap);
        c = from_json(doc);
        snap = to_json(c);
    }
    if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw ConfigError("--dev-fraction must be in [0, 1)");
    const SyntheticCorpus sc = generate_synthetic(c.synthetic);
    const auto n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(sc.examples.size()) * dev_fraction));
    const std::vector<Example> train(sc.examples.begin(), sc.examples.end() - static_cast<std::ptrdiff_t>(n_dev)),
        dev(sc.examples.end() - static_cast<std::ptrdiff_t>(n_dev), sc.examples.end());
    Manifest m("make-synthetic", common.argv);
    m.config(snap);
    if (!spec_path.empty()) m.input("spec", spec_path);
    const std::string corpus = in_dir(out_dir, "corpus.jsonl"), trp = in_dir(out_dir, "train.jsonl"),
                      dvp = in_dir(out_dir, "dev.jsonl"), kgp = in_dir(out_dir, "kg.tsv"),
                      prov = in_dir(out_dir, "provenance.json");
    save_corpus(sc.examples, corpus);
    save_corpus(train, trp);
    save_corpus(dev, dvp);
    write_file(kgp, export_graph(sc.kg));
    write_file(prov, provenance_json(c.synthetic).dump(2) + "\n");
    for (const auto& [role, p] : {std::pair{"corpus", corpus}, {"train", trp}, {"dev", dvp}, {"kg", kgp}, {"provenance", prov}})
        m.output(role, p);
    const json stats{{"examples", sc.examples.size()}, {"train", train.size()}, {"dev", dev.size()},
                     {"kg_nodes", sc.kg.concept_count()}, {"kg_edges", sc.kg.edge_count()}};
    m.note("stats", stats);
    m.write(in_dir(out_dir, "manifest.json"));
    print_json(stats);
    return 0;
}

int cmd_train_selectors(const std::string& train_path, const std::string& kg_path, const std::string& out_dir,
                        const Common& common) {
    json snap;
    const RunConfig c = common.resolve(&snap);
    const auto train = read_examples(train_path);
    const KnowledgeGraph kg = load_graph(kg_path);
    const SelectorPair sel = train_selectors(train, kg, c.selector, c.prepare.max_context_sentences);
    const std::string e = in_dir(out_dir, "entity.sel"), a = in_dir(out_dir, "attribute.sel"),
                      h = in_dir(out_dir, "selector_history.csv");
    sel.entity.save(e);
    sel.attribute.save(a);
    std::ostringstream csv;
    csv << "epoch,entity_loss,attribute_loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < sel.entity_history.size(); ++i)
        csv << i + 1 << ',' << sel.entity_history[i] << ','
            << (i < sel.attribute_history.size() ? sel.attribute_history[i] : 0.0) << '\n';
    write_file(h, csv.str());
    Manifest m("train-selectors", common.argv);
    m.config(snap);
    m.input("train", train_path);
    m.input("kg", kg_path);
    m.output("entity_selector", e);
    m.output("attribute_selector", a);
    m.output("history", h);
    const json res{{"entity_final_loss", sel.entity_history.empty() ? 0.0 : sel.entity_history.back()},
                   {"attribute_final_loss", sel.attribute_history.empty() ? 0.0 : sel.attribute_history.back()}};
    m.note("training", res);
    m.write(in_dir(out_dir, "manifest.json"));
    print_json(res);
    return 0;
}

json scored_json(const std::vector<ScoredConcept>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back({{"concept", s.name}, {"score", s.score}});
    return a;
}

int cmd_select(const std::string& corpus_path, const std::string& kg_path, const std::string& sel_dir,
               const std::string& out, const Common& common) {
    json snap;
    const RunConfig c = common.resolve(&snap);
    Manifest m("select", common.argv);
    m.config(snap);
    const auto examples = read_examples(corpus_path);
    const KnowledgeGraph kg = load_graph(kg_path);
    const Selectors sel = read_selectors(sel_dir, &m);
    const auto prepared = prepare_all(examples, kg, sel.e(), sel.a(), c.prepare, c.threads);
    std::ostringstream o;
    double total = 0;
    for (const auto& p : prepared) {
        json j;
        j["id"] = p.example.id;
        j["anchors"] = p.retrieved.anchors;
        j["retrieved"] = p.retrieved.hop_of.size();
        j["entities"] = scored_json(p.kg.entities);
        j["attributes"] = scored_json(p.kg.attributes);
        j["edges"] = p.kg.edges.size();
        total += static_cast<double>(p.kg.entities.size() + p.kg.attributes.size());
        o << j.dump() << '\n';
    }
    write_file(out, o.str());
    m.input("corpus", corpus_path);
    m.input("kg", kg_path);
    m.output("selections", out);
    const json res{{"examples", prepared.size()},
                   {"mean_selected", prepared.empty() ? 0.0 : total / static_cast<double>(prepared.size())}};
    m.note("selection", res);
    m.write(out + ".manifest.json");
    print_json(res);
    return 0;
}

int cmd_train_classifier(const std::string& train_path, const std::string& out_dir, double train_fraction,
                         const Common& common) {
    json snap;
    const RunConfig c = common.resolve(&snap);
    const auto examples = read_examples(train_path);
    std::vector<StateChange> pos;
    for (const auto& ex : examples) pos.insert(pos.end(), ex.gold.begin(), ex.gold.end());
    if (pos.empty()) throw ContractError("training corpus has no gold state changes");
    const ClassifierSplit split = holdout_split(pos, train_fraction, c.classifier.seed + 1);
    CoherenceClassifier clf(clause_tokens(split.train), c.classifier);
    const auto history = train_classifier(clf, split.train);
    const double acc = split.held_out.empty() ? -1.0 : classifier_accuracy(clf, split.held_out);
    const std::string ck = in_dir(out_dir, "classifier.ckpt"), h = in_dir(out_dir, "classifier_history.csv");
    clf.save(ck);
    std::ostringstream csv;
    csv << "epoch,loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < history.size(); ++i) csv << i + 1 << ',' << history[i] << '\n';
    write_file(h, csv.str());
    Manifest m("train-classifier", common.argv);
    m.config(snap);
    m.input("train", train_path);
    m.output("classifier", ck);
    m.output("history", h);
    json res{{"train_positives", split.train.size()}, {"held_out", split.held_out.size()}};
    if (acc >= 0) res["held_out_accuracy"] = acc;
    m.note("classifier", res);
    m.write(in_dir(out_dir, "manifest.json"));
    print_json(res);
    return 0;
}

struct TrainPaths {
    std::string train, dev, kg, selectors, classifier, out_dir, resume;
};

int cmd_train(const TrainPaths& p, const Common& common) {
    json snap;
    RunConfig c = common.resolve(&snap);
    Manifest m("train", common.argv);
    const auto train_ex = read_examples(p.train);
    const auto dev_ex = p.dev.empty() ? std::vector<Example>{} : read_examples(p.dev);
    const KnowledgeGraph kg = load_graph(p.kg);
    const Selectors sel = read_selectors(p.selectors, &m);
    std::optional<CoherenceClassifier> clf;
    if (!p.classifier.empty()) {
        clf.emplace(CoherenceClassifier::load(p.classifier));
        m.input("classifier", p.classifier);
        if (c.train.rl_start_epoch == 0) c.train.rl_start_epoch = c.train.epochs / 2 + 1;
    } else if (c.train.rl_start_epoch > 0) {
        throw ConfigError("train.rl_start_epoch > 0 needs --classifier");
    }
    snap = to_json(c);
    m.config(snap);
    const auto train = prepare_all(train_ex, kg, sel.e(), sel.a(), c.prepare, c.threads);
    const auto dev = prepare_all(dev_ex, kg, sel.e(), sel.a(), c.prepare, c.threads);
    DkgedModel model(Vocabulary::build(vocabulary_tokens(train, &kg)), c.model, kg.relations());
    Trainer trainer(model, c.train, clf ? &*clf : nullptr);
    if (!p.resume.empty()) {
        trainer.load_state(read_file(p.resume));
        m.input("resume_state", p.resume);
    }
    const TrainResult res = trainer.run(train, dev);
    const std::string final_ck = in_dir(p.out_dir, "final.ckpt"), best_ck = in_dir(p.out_dir, "model.ckpt"),
                      state = in_dir(p.out_dir, "train_state.bin"), log = in_dir(p.out_dir, "metrics.csv");
    save_checkpoint(final_ck, snapshot(model.params(), model.metadata()));
    // With a dev set the exported model is the best-dev epoch; without one it is the last.
    write_file(best_ck, !dev.empty() && !res.state.best_checkpoint.empty() ? res.state.best_checkpoint
                                                                            : read_file(final_ck));
    write_file(state, trainer.save_state());
    write_file(log, log_csv(res.state.log));
    m.input("train", p.train);
    if (!p.dev.empty()) m.input("dev", p.dev);
    m.input("kg", p.kg);
    for (const auto& [role, path] : {std::pair{"model", best_ck}, {"final_model", final_ck}, {"train_state", state}, {"metrics", log}})
        m.output(role, path);
    json out{{"epochs_run", res.state.epoch},
             {"best_epoch", res.state.best_epoch},
             {"best_score", res.state.best_score},
             {"stopped_early", res.stopped_early},
             {"final_train_loss", res.train_losses.empty() ? 0.0 : res.train_losses.back()}};
    m.note("training", out);
    m.write(in_dir(p.out_dir, "manifest.json"));
    print_json(out);
    return 0;
}

struct GeneratePaths {
    std::string model, corpus, kg, selectors, out;
    bool sample = false;
    double temperature = 1.0;
};

int cmd_generate(const GeneratePaths& p, const Common& common) {
    json snap;
    const RunConfig c = common.resolve(&snap);
    Manifest m("generate", common.argv);
    m.config(snap);
    const DkgedModel model = DkgedModel::from_checkpoint(load_checkpoint(p.model));
    const auto examples = read_examples(p.corpus);
    const KnowledgeGraph kg = load_graph(p.kg);
    const Selectors sel = read_selectors(p.selectors, &m);
    const auto prepared = prepare_all(examples, kg, sel.e(), sel.a(), c.prepare, c.threads);
    const auto lines = parallel_map(prepared.size(), c.threads, [&](std::size_t i) {
        const auto& pe = prepared[i];
        NoGradGuard ng;
        const auto ids = model.source_ids(pe.x);
        const ConstrainedVocab cv = build_constrained_vocab(ids, model.vocab(), model.embeddings(), c.train.gamma);
        Rng rng(c.seed * 1000003ULL + i);  // per example, so worker count does not matter
        const Generation g = generate(model, model.encode_ids(ids), model.knowledge(pe.kg), cv,
                                      {p.sample, p.temperature}, c.train.max_gen_len, p.sample ? &rng : nullptr);
        return generation_json_line(pe.example.id, g.tokens, segment_output(g.tokens));
    });
    std::string body;
    for (const auto& l : lines) body += l + '\n';
    write_file(p.out, body);
    m.input("model", p.model);
    m.input("corpus", p.corpus);
    m.input("kg", p.kg);
    m.output("predictions", p.out);
    m.write(p.out + ".manifest.json");
    print_json({{"predictions", lines.size()}, {"path", p.out}});
    return 0;
}

// Prediction lines carry "example_id" and clause objects; corpus lines carry
// "id" and template strings. Both are accepted on either side.
std::vector<std::pair<std::string, std::vector<StateChange>>> read_clause_file(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<std::pair<std::string, std::vector<StateChange>>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (collapse_whitespace(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ": invalid JSON: " + e.what(), lineno);
        }
        std::string id;
        if (j.contains("example_id"))
            id = j["example_id"].get<std::string>();
        else if (j.contains("id"))
            id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
        else
            throw ParseError(path + ": record lacks id", lineno);
        std::vector<StateChange> scs;
        if (j.contains("state_changes")) {
            for (const auto& s : j["state_changes"]) {
                if (s.is_string()) {
                    try {
                        scs.push_back(parse_state_change(s.get<std::string>()));
                    } catch (const MalformedTemplate&) {
                        // an unparseable prediction scores like a missing one
                    }
                } else {
                    scs.push_back(normalized({s.at("attribute").get<std::string>(), s.at("entity").get<std::string>(),
                                              s.at("before").get<std::string>(), s.at("after").get<std::string>()}));
                }
            }
        }
        out.emplace_back(std::move(id), std::move(scs));
    }
    return out;
}

int cmd_evaluate(const std::string& pred_path, const std::string& gold_path, const std::string& out,
                 const Common& common) {
    json snap;
    common.resolve(&snap);
    const auto preds = read_clause_file(pred_path);
    const auto golds = read_clause_file(gold_path);
    std::map<std::string, const std::vector<StateChange>*> by_id;
    for (const auto& [id, scs] : preds)
        if (!by_id.emplace(id, &scs).second) throw ContractError("duplicate prediction id " + id);
    std::set<std::string> gold_ids;
    for (const auto& g : golds) gold_ids.insert(g.first);
    for (const auto& [id, scs] : preds)
        if (!gold_ids.count(id)) throw ContractError("prediction id " + id + " is not in the gold file");
    ClauseSets P, G;
    std::vector<std::vector<StateChange>> PS, GS;
    for (const auto& [id, scs] : golds) {
        auto it = by_id.find(id);
        PS.push_back(it == by_id.end() ? std::vector<StateChange>{} : *it->second);
        GS.push_back(scs);
        P.push_back(serialized(PS.back()));
        G.push_back(serialized(scs));
    }
    const EvalReport rep = evaluate_all(P, G);
    json j = report_json(rep);
    const char* fields[] = {"attribute", "entity", "before", "after"};
    for (std::size_t f = 0; f < 4; ++f) j["fields"][fields[f]] = prf_json(field_scores(PS, GS, f));
    if (!out.empty()) {
        write_file(out, j.dump(2) + "\n");
        Manifest m("evaluate", common.argv);
        m.config(snap);
        m.input("predictions", pred_path);
        m.input("gold", gold_path);
        m.output("report", out);
        m.write(out + ".manifest.json");
    }
    print_json(j);
    return 0;
}

struct SweepArgs {
    std::string param, values, train, dev, kg, selectors, classifier, out;
};

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    for (std::string tok; std::getline(is, tok, ',');) {
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (tok.empty() || *end != '\0') throw ConfigError("bad sweep value '" + tok + "'");
        out.push_back(v);
    }
    return out;
}

int cmd_sweep(const SweepArgs& a, const Common& common) {
    json snap;
    const RunConfig c = common.resolve(&snap);
    const SweepParam param = sweep_param_from(a.param);
    const auto values = a.values.empty() ? default_sweep_values(param) : parse_values(a.values);
    Manifest m("sweep", common.argv);
    m.config(snap);
    const auto train = read_examples(a.train);
    const auto dev = read_examples(a.dev);
    const KnowledgeGraph kg = load_graph(a.kg);
    const Selectors sel = read_selectors(a.selectors, &m);
    std::optional<CoherenceClassifier> clf;
    if (!a.classifier.empty()) {
        clf.emplace(CoherenceClassifier::load(a.classifier));
        m.input("classifier", a.classifier);
    }
    SweepInputs in;
    in.train = &train;
    in.dev = &dev;
    in.graph = &kg;
    in.entity_selector = sel.e();
    in.attribute_selector = sel.a();
    in.classifier = clf ? &*clf : nullptr;
    in.prepare = c.prepare;
    in.model = c.model;
    in.train_cfg = c.train;
    in.train_cfg.patience = std::max(in.train_cfg.patience, in.train_cfg.epochs + 1);
    in.train_cfg.eval_every = in.train_cfg.epochs;
    const std::string csv = sweep_csv(param, run_sweep(param, values, in));
    m.input("train", a.train);
    m.input("dev", a.dev);
    m.input("kg", a.kg);
    if (a.out.empty()) {
        std::cout << csv;
        return 0;
    }
    write_file(a.out, csv);
    m.output("csv", a.out);
    m.write(a.out + ".manifest.json");
    std::cout << csv;
    return 0;
}

int cmd_grad_check() {
    const auto r = gradsuite::run_suite();
    for (const auto& c : r.checks)
        std::printf("%-28s %.3e %s\n", c.name.c_str(), c.error, c.passed() ? "ok" : "FAIL");
    std::printf("%zu checks, worst %.3e, tolerance %.0e, %.1f s\n", r.checks.size(), r.worst(), gradsuite::kTolerance,
                r.seconds);
    if (!r.passed()) throw VerificationError("gradient check failed: worst relative error " + std::to_string(r.worst()));
    return 0;
}

int run(int argc, char** argv);

// Re-runs a recorded command once its inputs are verified unchanged, then
// checks the outputs reproduce byte for byte.
int cmd_replay(const std::string& manifest_path) {
    const json doc = read_json_file(manifest_path);
    if (!doc.contains("argv") || !doc.contains("cwd")) throw ConfigError(manifest_path + " is not a run manifest");
    const fs::path cwd = doc.at("cwd").get<std::string>();
    auto resolve = [&](const json& entry) { return (cwd / entry.at("path").get<std::string>()).string(); };
    auto check = [&](const char* section, const char* what) {
        if (!doc.contains(section)) return;
        for (const auto& [role, entry] : doc.at(section).items())
            if (git_blob_hash(read_file(resolve(entry))) != entry.at("sha1").get<std::string>())
                throw VerificationError(std::string(what) + " " + role + " (" + resolve(entry) + ") differs from the manifest");
    };
    check("inputs", "input");
    std::vector<std::string> args = doc.at("argv").get<std::vector<std::string>>();
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    const fs::path here = fs::current_path();
    fs::current_path(cwd);
    std::cout.setstate(std::ios::failbit);  // the replayed command's report is not ours
    const int code = run(static_cast<int>(ptrs.size()), ptrs.data());
    std::cout.clear();
    fs::current_path(here);
    if (code != 0) return code;
    check("outputs", "output");
    print_json({{"replayed", doc.at("command")}, {"outputs", doc.contains("outputs") ? doc.at("outputs").size() : 0}});
    return 0;
}

int emit_error(const char* kind, const std::string& what, int code) {
    std::cerr << json{{"error", kind}, {"message", what}, {"exit_code", code}}.dump() << '\n';
    return code;
}

int run(int argc, char** argv) {
    CLI::App app{"kiest: knowledge-enhanced state-change generation, batch driver"};
    app.require_subcommand(1);
    Common common;
    common.argv.assign(argv, argv + argc);

    std::string a1, a2, out, out_dir, kg, selectors;
    double dev_fraction = 0.2, train_fraction = 0.8;
    TrainPaths tp;
    GeneratePaths gp;
    SweepArgs sa;

    auto* build = app.add_subcommand("build-kg", "Validate an edge list and report node/edge counts");
    build->add_option("edges", a1, "head<TAB>relation<TAB>tail file")->required();
    build->add_option("--out", out, "Write the normalized, sorted edge list here");
    add_common(build, common);

    auto* synth = app.add_subcommand("make-synthetic", "Generate a synthetic corpus and its knowledge graph");
    synth->add_option("spec", a1, "JSON spec: synthetic fields, or a whole run config");
    synth->add_option("--out-dir", out_dir, "Output directory")->required();
    synth->add_option("--dev-fraction", dev_fraction, "Share of examples written to dev.jsonl");
    flag_override<std::size_t>(synth, common, "--size", "synthetic", "size", "Number of examples");
    flag_override<std::size_t>(synth, common, "--distractors", "synthetic", "distractor_entities",
                               "Other-family entities linked to each object");
    flag_override<std::size_t>(synth, common, "--max-clauses", "synthetic", "max_clauses", "State changes per example");
    add_common(synth, common);

    auto* tsel = app.add_subcommand("train-selectors", "Train the entity and attribute selectors");
    tsel->add_option("--train", a1, "Training corpus (JSONL)")->required();
    tsel->add_option("--kg", kg, "Edge list")->required();
    tsel->add_option("--out-dir", out_dir, "Output directory")->required();
    flag_override<std::size_t>(tsel, common, "--epochs", "selector", "epochs", "Selector epochs");
    add_common(tsel, common);

    auto* sel = app.add_subcommand("select", "Dump per-example retrieval and selection");
    sel->add_option("--corpus", a1, "Corpus (JSONL)")->required();
    sel->add_option("--kg", kg, "Edge list")->required();
    sel->add_option("--selectors", selectors, "Directory with entity.sel and attribute.sel");
    sel->add_option("--out", out, "Selections (JSONL)")->required();
    add_prepare_flags(sel, common);
    add_common(sel, common);

    auto* tclf = app.add_subcommand("train-classifier", "Train the coherence classifier on slot-swap negatives");
    tclf->add_option("--train", a1, "Training corpus (JSONL)")->required();
    tclf->add_option("--out-dir", out_dir, "Output directory")->required();
    tclf->add_option("--train-fraction", train_fraction, "Share of gold clauses used for training; the rest is held out");
    flag_override<std::size_t>(tclf, common, "--epochs", "classifier", "epochs", "Classifier epochs");
    add_common(tclf, common);

    auto* train = app.add_subcommand("train", "Train the generator; writes checkpoints and the metric log");
    train->add_option("--train", tp.train, "Training corpus (JSONL)")->required();
    train->add_option("--dev", tp.dev, "Dev corpus for best-epoch selection and early stopping");
    train->add_option("--kg", tp.kg, "Edge list")->required();
    train->add_option("--selectors", tp.selectors, "Selector directory (needed unless --mode none)");
    train->add_option("--classifier", tp.classifier, "Coherence classifier checkpoint; enables the RL phase");
    train->add_option("--resume", tp.resume, "Continue from a train_state.bin");
    train->add_option("--out-dir", tp.out_dir, "Output directory")->required();
    add_train_flags(train, common);
    add_prepare_flags(train, common);
    add_common(train, common);

    auto* gen = app.add_subcommand("generate", "Decode state changes for a corpus");
    gen->add_option("--model", gp.model, "Model checkpoint")->required();
    gen->add_option("--corpus", gp.corpus, "Corpus (JSONL)")->required();
    gen->add_option("--kg", gp.kg, "Edge list")->required();
    gen->add_option("--selectors", gp.selectors, "Selector directory (needed unless --mode none)");
    gen->add_option("--out", gp.out, "Predictions (JSONL)")->required();
    gen->add_flag("--sample", gp.sample, "Sample instead of greedy decoding");
    gen->add_option("--temperature", gp.temperature, "Sampling temperature");
    flag_override<double>(gen, common, "--gamma", "train", "gamma", "Decoding relevance threshold, <= 1");
    add_prepare_flags(gen, common);
    add_common(gen, common);

    auto* eval = app.add_subcommand("evaluate", "Score predictions against gold (micro P/R/F1)");
    eval->add_option("pred", a1, "Predictions or corpus JSONL")->required();
    eval->add_option("gold", a2, "Gold corpus JSONL")->required();
    eval->add_option("--out", out, "Also write the report here");
    add_common(eval, common);

    auto* sweep = app.add_subcommand("sweep", "F1 and cardinalities per value of one hyper-parameter (CSV)");
    sweep->add_option("--param", sa.param, "gamma, epsilon, hops or lambda")->required();
    sweep->add_option("--values", sa.values, "Comma-separated values (default depends on --param)");
    sweep->add_option("--train", sa.train, "Training corpus (JSONL)")->required();
    sweep->add_option("--dev", sa.dev, "Dev corpus (JSONL)")->required();
    sweep->add_option("--kg", sa.kg, "Edge list")->required();
    sweep->add_option("--selectors", sa.selectors, "Selector directory (needed unless --mode none)");
    sweep->add_option("--classifier", sa.classifier, "Coherence classifier checkpoint (lambda sweeps)");
    sweep->add_option("--out", sa.out, "CSV path (also printed)");
    add_train_flags(sweep, common);
    add_prepare_flags(sweep, common);
    add_common(sweep, common);

    auto* grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");

    auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest and verify its outputs");
    replay->add_option("manifest", a1, "manifest.json written by an earlier run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return emit_error("usage", e.what(), 1);
    }

    try {
        if (*build) return cmd_build_kg(a1, out, common);
        if (*synth) return cmd_make_synthetic(a1, out_dir, dev_fraction, common);
        if (*tsel) return cmd_train_selectors(a1, kg, out_dir, common);
        if (*sel) return cmd_select(a1, kg, selectors, out, common);
        if (*tclf) return cmd_train_classifier(a1, out_dir, train_fraction, common);
        if (*train) return cmd_train(tp, common);
        if (*gen) return cmd_generate(gp, common);
        if (*eval) return cmd_evaluate(a1, a2, out, common);
        if (*sweep) return cmd_sweep(sa, common);
        if (*grad) return cmd_grad_check();
        if (*replay) return cmd_replay(a1);
    } catch (const IoError& e) {
        return emit_error("io", e.what(), 2);
    } catch (const VerificationError& e) {
        return emit_error("verification", e.what(), 3);
    } catch (const fs::filesystem_error& e) {
        return emit_error("io", e.what(), 2);
    } catch (const ConfigError& e) {
        return emit_error("config", e.what(), 1);
    } catch (const ParseError& e) {
        return emit_error("parse", e.what(), 1);
    } catch (const Error& e) {
        return emit_error("contract", e.what(), 1);
    } catch (const nlohmann::json::exception& e) {
        return emit_error("contract", e.what(), 1);
    } catch (const std::exception& e) {
        return emit_error("internal", e.what(), 1);
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
