#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "kiest/corpus.hpp"

using namespace kiest;
using namespace kiest::fixtures;

TEST(Template, FigureOneClause) {
    const StateChange sc = parse_state_change("length of celery was longer before and shorter afterwards");
    EXPECT_EQ(sc, (StateChange{"length", "celery", "longer", "shorter"}));
    EXPECT_EQ(serialize_state_change(sc), "length of celery was longer before and shorter afterwards");
}

TEST(Template, MalformedExamplesRejected) {
    for (const char* bad : {"flexibility of was hard before and soft afterwards", "location of vegetable"}) {
        try {
            parse_state_change(bad);
            FAIL() << bad;
        } catch (const MalformedTemplate& e) {
            EXPECT_EQ(e.text(), bad);
        }
    }
    EXPECT_THROW(parse_state_change("color of cup was red before and afterwards"), MalformedTemplate);
    EXPECT_THROW(parse_state_change("color of cup was red before and blue"), MalformedTemplate);
}

TEST(Template, InvariantViolationsRejectedBySerializer) {
    EXPECT_THROW(serialize_state_change({"color", "cup", "red", "blue afterwards"}), ContractError);
    EXPECT_THROW(serialize_state_change({"color", "cup", "red before and", "blue"}), ContractError);
    EXPECT_THROW(serialize_state_change({"color", "cup of tea", "red", "blue"}), ContractError);
    EXPECT_THROW(serialize_state_change({"", "cup", "red", "blue"}), ContractError);
}

TEST(Template, MultiWordRoundTripAndNormalization) {
    const StateChange sc{"water level", "measuring cup", "half full before noon", "full and cold"};
    EXPECT_EQ(parse_state_change(serialize_state_change(sc)), sc);
    const std::string messy = "  Length  OF celery   was longer before and shorter afterwards ";
    const std::string once = serialize_state_change(parse_state_change(messy));
    EXPECT_EQ(once, normalize_text(messy));
    EXPECT_EQ(serialize_state_change(parse_state_change(once)), once);
}

TEST(Template, RandomRoundTrip) {
    Rng rng(21);
    std::size_t checked = 0;
    while (checked < 10000) {
        StateChange sc{random_field(rng, true), random_field(rng, true), random_field(rng, false), random_field(rng, false)};
        if (!is_valid(sc)) continue;
        ASSERT_EQ(parse_state_change(serialize_state_change(sc)), sc) << serialize_state_change(sc);
        ++checked;
    }
}

TEST(LoadCorpus, SpellingMalformedAndCounts) {
    std::istringstream spelling("liqour\tliquor\n");
    const SpellingMap map = parse_spelling_map(spelling);
    std::istringstream in(
        R"({"id":"a","context":["Pour the liqour."],"query":"Stir the glass.","state_changes":["fullness of liqour was high before and low afterwards","location of vegetable"]})"
        "\n"
        R"({"id":"b","context":[],"query":"Wait. what happens?","state_changes":["flexibility of was hard before and soft afterwards"]})"
        "\n"
        "not json\n");
    const CorpusLoad load = parse_corpus(in, map);
    ASSERT_EQ(load.examples.size(), 2u);
    EXPECT_EQ(load.examples[0].gold.at(0).entity, "liquor");
    EXPECT_EQ(load.examples[0].context.at(0), "pour the liquor.");
    EXPECT_EQ(load.examples[0].query, "stir the glass. what happens?");
    EXPECT_EQ(load.examples[1].query, "wait. what happens?");
    EXPECT_TRUE(load.examples[1].gold.empty());
    EXPECT_EQ(load.report.input_clauses, 3u);
    EXPECT_EQ(load.report.accepted_clauses + load.report.malformed_clauses.size(), load.report.input_clauses);
    ASSERT_EQ(load.report.rejected_lines.size(), 1u);
    EXPECT_EQ(load.report.rejected_lines[0].line, 3u);
}

TEST(LoadCorpus, FieldMappingAdapter) {
    std::istringstream in(R"({"uid":"z","hist":"Open the jar.","q":"Pour it.","scs":["openness of jar was closed before and open afterwards"]})");
    FieldMapping fm{"uid", "hist", "q", "scs"};
    const CorpusLoad load = parse_corpus(in, {}, fm);
    ASSERT_EQ(load.examples.size(), 1u);
    EXPECT_EQ(load.examples[0].id, "z");
    EXPECT_EQ(load.examples[0].gold.size(), 1u);
}

TEST(LoadCorpus, TwentyLineFixtureRoundTrips) {
    SyntheticSpec spec;
    spec.size = 20;
    spec.max_clauses = 2;
    const auto sc = generate_synthetic(spec);
    std::ostringstream first;
    save_corpus(sc.examples, first);
    std::istringstream in(first.str());
    const CorpusLoad load = parse_corpus(in);
    EXPECT_TRUE(load.report.rejected_lines.empty());
    std::ostringstream second;
    save_corpus(load.examples, second);
    EXPECT_EQ(second.str(), first.str());
}

TEST(Synthetic, SizeOneAndDeterminism) {
    SyntheticSpec spec;
    spec.size = 1;
    auto one = generate_synthetic(spec);
    ASSERT_EQ(one.examples.size(), 1u);
    ASSERT_EQ(one.examples[0].gold.size(), 1u);
    EXPECT_TRUE(one.kg.contains(one.examples[0].gold[0].entity));

    spec.size = 60;
    spec.max_clauses = 2;
    std::ostringstream a, b;
    save_corpus(generate_synthetic(spec).examples, a);
    save_corpus(generate_synthetic(spec).examples, b);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(export_graph(generate_synthetic(spec).kg), export_graph(generate_synthetic(spec).kg));
    spec.seed = 8;
    std::ostringstream c;
    save_corpus(generate_synthetic(spec).examples, c);
    EXPECT_NE(a.str(), c.str());
}

TEST(Synthetic, KnowledgeFreeModeShowsEntities) {
    SyntheticSpec spec;
    spec.size = 200;
    spec.knowledge_dependent = false;
    spec.max_clauses = 2;
    for (const auto& ex : generate_synthetic(spec).examples) {
        const auto toks = input_tokens(ex);
        for (const auto& g : ex.gold) EXPECT_NE(std::find(toks.begin(), toks.end(), g.entity), toks.end()) << ex.id;
        EXPECT_TRUE(ex.query.ends_with(kQuestion));
    }
}

TEST(Synthetic, GoldIsValidAndCanonical) {
    SyntheticSpec spec;
    spec.size = 300;
    spec.max_clauses = 2;
    for (const auto& ex : generate_synthetic(spec).examples) {
        auto sorted = ex.gold;
        canonical_sort(sorted);
        EXPECT_EQ(sorted, ex.gold);
        for (const auto& g : ex.gold) EXPECT_TRUE(is_valid(g));
    }
}
