// One PASS/FAIL line per acceptance criterion. Arguments select criteria by
// number; no arguments runs all ten. Exit status is 1 when any selected
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "kiest/decoding.hpp"
#include "kiest/graphenc.hpp"
#include "kiest/metrics.hpp"
#include "kiest/sweep.hpp"
#include "oracles.hpp"

using namespace kiest;
using namespace kiest::fixtures;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1
Outcome gradient_suite() {
    const auto r = gradsuite::run_suite();
    std::string worst_name;
    for (const auto& c : r.checks)
        if (c.error == r.worst()) worst_name = c.name;
    std::size_t failed = 0;
    for (const auto& c : r.checks) failed += !c.passed();
    return {r.passed() && r.seconds < 120.0,
            fmt("%zu checks, %zu over 1e-4, worst %.2e (%s), %.1f s", r.checks.size(), failed, r.worst(),
                worst_name.c_str(), r.seconds)};
}

// 2
Outcome rgcn_oracle() {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = oracles::random_graph(rng);
        ParameterStore ps;
        RgcnEncoder enc(ps, "g", 4, 2, g.relations, rng);
        const Tensor init = random_matrix(g.order.size(), 4, rng);
        const Tensor out = enc.forward(g.order, g.edges, init);
        const auto expect = oracles::oracle_forward(g.order, g.edges, oracles::to_mat(init), enc);
        for (std::size_t i = 0; i < g.order.size(); ++i)
            for (std::size_t k = 0; k < 4; ++k) worst = std::max(worst, std::abs(out.at(i, k) - expect[i][k]));
    }
    return {worst <= 1e-6, fmt("20 graphs, max |diff| %.2e", worst)};
}

// 3
Outcome routing_invariance() {
    const Vocabulary v = word_vocab(30);
    Rng rng(13);
    std::size_t violations = 0, inert = 0;
    std::string first;
    for (int fixture = 0; fixture < 20; ++fixture) {
        ModelConfig cfg = small_config(1, 8, 100 + fixture);
        cfg.fuse_with_source = fixture % 4 == 3;
        DkgedModel m(v, cfg, {"RelatedTo", "HasProperty"});
        const Tensor X = m.encode(random_source(v, rng, 6));
        const Knowledge k{random_matrix(3, 8, rng), random_matrix(2, 8, rng)};
        const auto target = random_target(v, rng);
        for (int which : {1, 2}) {
            const auto r = check_routing(m, X, target, k, which, rng);
            if (!r.ok) {
                ++violations;
                if (first.empty()) first = r.detail;
            }
            inert += r.changed_routed == 0;
        }
    }
    return {violations == 0 && inert == 0,
            fmt("20 fixtures x 2 replacements, %zu non-routed rows changed, %zu replacements without effect%s%s",
                violations, inert, first.empty() ? "" : "; first: ", first.c_str())};
}

// 4
double cosine_oracle(const Tensor& e, std::size_t a, std::size_t b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < e.cols(); ++j) {
        dot += e.at(a, j) * e.at(b, j);
        na += e.at(a, j) * e.at(a, j);
        nb += e.at(b, j) * e.at(b, j);
    }
    return dot / std::sqrt(na * nb);
}

Outcome constrained_decoding() {
    auto words = content_words(word_vocab(36));
    words.push_back("cărți");
    words.push_back("$9");
    const Vocabulary v = Vocabulary::build(words);
    const std::size_t bad1 = v.id("cărți"), bad2 = v.id("$9");
    Rng rng(8);

    std::size_t non_monotone = 0, special_allowed = 0;
    for (int trial = 0; trial < 20; ++trial) {
        DkgedModel m(v, small_config(1, 8, 200 + trial), {});
        auto src = v.encode(random_source(v, rng, 3));
        src.push_back(bad1);
        src.push_back(bad2);
        std::vector<bool> prev;
        for (int step = 0; step <= 20; ++step) {
            const double gamma = step * 0.05;
            const auto cv = build_constrained_vocab(src, v, m.embeddings(), gamma);
            special_allowed += cv.allowed[bad1] + cv.allowed[bad2];
            if (!prev.empty())
                for (std::size_t id = 0; id < v.size(); ++id) non_monotone += cv.allowed[id] && !prev[id];
            prev = cv.allowed;
        }
    }

    const double gamma = 0.4;
    std::size_t checked = 0, low_relevance = 0, special_emitted = 0;
    for (int trial = 0; trial < 100; ++trial) {
        DkgedModel m(v, small_config(1, 8, 300 + trial / 10), {"RelatedTo", "HasProperty"});
        auto x = random_source(v, rng, 5);
        x.push_back("cărți");
        x.push_back("$9");
        const auto src = m.source_ids(x);
        const auto cv = build_constrained_vocab(src, v, m.embeddings(), gamma);
        const auto g = generate(m, m.encode(x), m.knowledge(small_kg(v)), cv, {true, 1.5}, 32, &rng);
        for (auto id : g.ids) {
            special_emitted += id == bad1 || id == bad2;
            if (Vocabulary::is_reserved(id) || v.is_template(id)) continue;
            double xi = -1.0;
            for (auto s : src) xi = std::max(xi, cosine_oracle(m.embeddings(), id, s));
            low_relevance += xi <= gamma;
            ++checked;
        }
    }
    return {non_monotone == 0 && special_allowed == 0 && low_relevance == 0 && special_emitted == 0 && checked > 0,
            fmt("gamma grid 0..1 on 20 models: %zu monotonicity breaks, %zu special-symbol admissions; "
                "100 samples at gamma 0.4: %zu content tokens, %zu with xi <= gamma, %zu special symbols",
                non_monotone, special_allowed, checked, low_relevance, special_emitted)};
}

// 5
Outcome overfit() {
    const auto run = overfit_run(11);
    return {run.result.reached_target && run.train_exact >= 0.95 && run.result.state.epoch <= 300 && run.seconds < 600.0,
            fmt("train exact-match F1 %.3f at epoch %zu, %.1f s", run.train_exact, run.result.state.epoch, run.seconds)};
}

// 6
Outcome knowledge_gain() {
    double se = 0, ne = 0, sp = 0, rp = 0;
    std::string per_seed;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto k = knowledge_benefit(seed);
        se += k.selected_entity / 3;
        ne += k.none_entity / 3;
        sp += k.selected_precision / 3;
        rp += k.raw_precision / 3;
        per_seed += fmt("; seed %d entity %.2f/%.2f precision %.2f/%.2f", static_cast<int>(seed), k.selected_entity,
                        k.none_entity, k.selected_precision, k.raw_precision);
    }
    return {se - ne >= 0.10 && rp < sp,
            fmt("entity EM selected %.3f vs none %.3f (+%.1f points); precision selected %.3f vs raw %.3f", se, ne,
                100 * (se - ne), sp, rp) +
                per_seed};
}

// 7
Outcome coherence() {
    double worst_acc = 1.0;
    for (std::uint64_t seed : {31, 32, 33}) worst_acc = std::min(worst_acc, coherence_holdout(seed).accuracy);
    std::size_t breaks = 0;
    double final_p = 1.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto trace = bandit_trace(seed, 50);
        for (std::size_t i = 1; i < trace.size(); ++i) breaks += !(trace[i] > trace[i - 1]);
        final_p = std::min(final_p, trace.back());
    }
    return {worst_acc >= 0.95 && breaks == 0,
            fmt("slot-swap held-out accuracy min %.3f over 3 seeds; bandit: %zu non-increasing steps of 150, "
                "final p >= %.3f",
                worst_acc, breaks, final_p)};
}

// 8
Outcome metric_oracles() {
    double worst = 0.0;
    for (const auto& [c, r] : oracles::kCraftedPairs) {
        const auto a = split_whitespace(c), b = split_whitespace(r);
        worst = std::max(worst, std::abs(bleu2(a, b) - oracles::naive_bleu2(a, b)));
        worst = std::max(worst, std::abs(rouge_l(a, b) - oracles::naive_rouge(a, b)));
    }
    const bool worked = std::abs(bleu2(split_whitespace("a b c"), split_whitespace("a b d")) - std::sqrt(1.0 / 3.0)) < 1e-12 &&
                        std::abs(rouge_l(split_whitespace("a b c"), split_whitespace("a c")) - 0.8) < 1e-12 &&
                        bleu2(split_whitespace("the cat sat"), split_whitespace("the cat sat")) == 1.0;
    const ClauseSets preds{{"x of y was a before and b afterwards", "p of q was r before and s afterwards"}};
    const ClauseSets golds{{"x of y was a before and b afterwards"}};
    const Prf s = micro_set_scores(preds, golds, Overlap::ExactMatch).at(Overlap::ExactMatch);
    const bool micro = s.precision == 0.5 && s.recall == 1.0 && s.f1 == 2.0 / 3.0;
    return {worst <= 1e-9 && worked && micro,
            fmt("10 pairs max |diff| %.2e; worked examples %s; micro P/R/F1 = %.17g/%.17g/%.17g", worst,
                worked ? "match" : "differ", s.precision, s.recall, s.f1)};
}

// 9
Outcome template_round_trip() {
    Rng rng(21);
    std::size_t checked = 0, broken = 0;
    while (checked < 10000) {
        StateChange sc{random_field(rng, true), random_field(rng, true), random_field(rng, false), random_field(rng, false)};
        if (!is_valid(sc)) continue;
        broken += !(parse_state_change(serialize_state_change(sc)) == sc);
        ++checked;
    }
    std::size_t rejected = 0;
    for (const char* bad : {"flexibility of was hard before and soft afterwards", "location of vegetable"}) {
        try {
            parse_state_change(bad);
        } catch (const MalformedTemplate& e) {
            rejected += e.text() == bad;
        }
    }
    return {broken == 0 && rejected == 2,
            fmt("%zu round trips, %zu mismatches; malformed examples rejected %zu/2", checked, broken, rejected)};
}

// 10
std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::istringstream is(line);
        std::string cell;
        while (std::getline(is, cell, ',')) f.push_back(cell);
        rows.push_back(std::move(f));
    }
    return rows;
}

// Returns "" when the file has the header, `n` rows of numeric cells and a
// nonincreasing column `col`.
std::string check_sweep_csv(const std::string& path, const char* param, std::size_t n, std::size_t col) {
    const auto rows = read_csv(path);
    std::vector<std::string> expect;
    std::istringstream is(kSweepHeader);
    for (std::string c; std::getline(is, c, ',');) expect.push_back(c);
    if (rows.empty() || rows[0] != expect) return std::string(param) + ": bad header";
    if (rows.size() != n + 1) return std::string(param) + ": " + std::to_string(rows.size() - 1) + " rows";
    double prev_value = -1e300, prev_col = 1e300;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != expect.size() || rows[i][0] != param) return std::string(param) + ": malformed row";
        std::vector<double> v;
        for (std::size_t j = 1; j < rows[i].size(); ++j) {
            char* end = nullptr;
            v.push_back(std::strtod(rows[i][j].c_str(), &end));
            if (*end != '\0' || !std::isfinite(v.back())) return std::string(param) + ": non-numeric cell";
        }
        if (v[0] <= prev_value) return std::string(param) + ": values not increasing";
        if (v[col - 1] > prev_col) return std::string(param) + ": column " + expect[col] + " increases";
        prev_value = v[0];
        prev_col = v[col - 1];
    }
    return "";
}

Outcome sweep_harness() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto fx = sweep_fixture();
    const auto dir = std::filesystem::temp_directory_path() / "kiest_acceptance";
    std::filesystem::create_directories(dir);
    const auto in = fx.inputs(20);
    const std::string g = (dir / "gamma.csv").string(), e = (dir / "epsilon.csv").string();
    const auto grows = run_sweep(SweepParam::Gamma, {0.0, 0.2, 0.4, 0.6, 0.8}, in);
    std::ofstream(g) << sweep_csv(SweepParam::Gamma, grows);
    const auto erows = run_sweep(SweepParam::Epsilon, {0.3, 0.5}, in);
    std::ofstream(e) << sweep_csv(SweepParam::Epsilon, erows);
    std::string problem = check_sweep_csv(g, "gamma", 5, 2);
    if (problem.empty()) problem = check_sweep_csv(e, "epsilon", 2, 3);
    return {problem.empty(),
            fmt("vocab size %.1f -> %.1f over gamma, selection size %.2f -> %.2f over epsilon, %.1f s%s%s",
                grows.front().vocab_size, grows.back().vocab_size, erows.front().selection_size,
                erows.back().selection_size, seconds_since(t0), problem.empty() ? "" : "; ", problem.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"RGCN oracle", rgcn_oracle},
        {"routing invariance", routing_invariance},
        {"constrained decoding", constrained_decoding},
        {"overfit sanity", overfit},
        {"knowledge benefit", knowledge_gain},
        {"coherence classifier and REINFORCE", coherence},
        {"metric oracles", metric_oracles},
        {"template round-trip", template_round_trip},
        {"sweep harness", sweep_harness},
    };
    std::set<std::size_t> pick;
    for (int i = 1; i < argc; ++i) pick.insert(std::strtoul(argv[i], nullptr, 10));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!pick.empty() && !pick.count(i + 1)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        all = all && o.pass;
        std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
