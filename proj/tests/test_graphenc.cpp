#include <gtest/gtest.h>

#include <random>

#include "kiest/graphenc.hpp"
#include "kiest/numerics/gradcheck.hpp"
#include "oracles.hpp"

using namespace kiest;
using namespace kiest::oracles;

namespace {

void fill(Tensor t, const std::vector<double>& v) { std::copy(v.begin(), v.end(), t.mutable_data().begin()); }

void set_identity(Tensor t) {
    auto d = t.mutable_data();
    const std::size_t n = t.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] = i == j ? 1.0 : 0.0;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(r * c);
    for (auto& x : v) x = g(rng);
    return Tensor::from({r, c}, v);
}

}  // namespace

TEST(Rgcn, SelfLoopOnly) {
    ParameterStore ps;
    Rng rng(1);
    RgcnEncoder enc(ps, "g", 3, 1, {}, rng);
    set_identity(enc.layers()[0].self);
    const Tensor h = Tensor::from({1, 3}, {0.5, -1.0, 2.0});
    const Tensor out = enc.forward({"n"}, {}, h);
    EXPECT_EQ(out[0], 0.5);
    EXPECT_EQ(out[1], 0.0);
    EXPECT_EQ(out[2], 2.0);
}

TEST(Rgcn, TwoNodesIdentityWeights) {
    ParameterStore ps;
    Rng rng(1);
    RgcnEncoder enc(ps, "g", 2, 1, {"R"}, rng);
    set_identity(enc.layers()[0].self);
    set_identity(enc.layers()[0].relation.at("R"));
    const Tensor h = Tensor::from({2, 2}, {1.0, -3.0, 2.0, 0.5});
    const Tensor out = enc.forward({"a", "b"}, {{"a", "R", "b"}}, h);
    EXPECT_EQ(out.at(0, 0), 3.0);
    EXPECT_EQ(out.at(0, 1), 0.0);
    EXPECT_EQ(out.at(1, 0), 3.0);
    EXPECT_EQ(out.at(1, 1), 0.0);
}

TEST(Rgcn, MatchesBruteForceOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const RandomGraph g = random_graph(rng);
        ParameterStore ps;
        RgcnEncoder enc(ps, "g", 4, 2, g.relations, rng);
        const Tensor init = random_matrix(g.order.size(), 4, rng);
        const Tensor out = enc.forward(g.order, g.edges, init);
        const Mat expect = oracle_forward(g.order, g.edges, to_mat(init), enc);
        for (std::size_t i = 0; i < g.order.size(); ++i)
            for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out.at(i, k), expect[i][k], 1e-6) << trial;
    }
}

TEST(Rgcn, PermutationEquivariant) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const RandomGraph g = random_graph(rng);
        ParameterStore ps;
        RgcnEncoder enc(ps, "g", 3, 2, g.relations, rng);
        const Tensor init = random_matrix(g.order.size(), 3, rng);
        const Tensor out = enc.forward(g.order, g.edges, init);
        std::vector<std::size_t> perm(g.order.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::string> order2;
        for (auto p : perm) order2.push_back(g.order[p]);
        const Tensor out2 = enc.forward(order2, g.edges, gather_rows(init, perm));
        for (std::size_t i = 0; i < perm.size(); ++i)
            for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(out2.at(i, k), out.at(perm[i], k));
    }
}

TEST(Rgcn, GradientCheck) {
    Rng rng(8);
    RandomGraph g;
    g.order = {"a", "b", "c", "d", "e"};
    g.edges = {{"a", "R0", "b"}, {"b", "R1", "c"}, {"c", "R0", "d"}, {"a", "R1", "d"}, {"e", "R0", "a"}};
    g.relations = {"R0", "R1"};
    ParameterStore ps;
    RgcnEncoder enc(ps, "g", 3, 2, g.relations, rng);
    Tensor init = random_matrix(5, 3, rng);
    init = Tensor::from(init.shape(), std::vector<double>(init.data().begin(), init.data().end()), true);
    auto params = ps.tensors();
    params.push_back(init);
    const double err = grad_check_params([&] {
        const Tensor out = enc.forward(g.order, g.edges, init);
        return sum(mul(out, out));
    }, params);
    EXPECT_LT(err, 1e-4);
}

TEST(Rgcn, ZeroRelationWeightsReduceToSelfLoop) {
    Rng rng(9);
    const RandomGraph g = random_graph(rng);
    ParameterStore ps;
    RgcnEncoder enc(ps, "g", 4, 1, g.relations, rng);
    for (auto& [rel, w] : enc.layers()[0].relation) fill(w, std::vector<double>(16, 0.0));
    const Tensor init = random_matrix(g.order.size(), 4, rng);
    const Tensor out = enc.forward(g.order, g.edges, init);
    const Tensor expect = relu(matmul(init, enc.layers()[0].self));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], expect[i]);
}

TEST(Rgcn, UnseenRelationUsesUnknownWeight) {
    Rng rng(10);
    ParameterStore ps;
    RgcnEncoder enc(ps, "g", 2, 1, {"R"}, rng);
    const Tensor init = random_matrix(2, 2, rng);
    const Tensor a = enc.forward({"x", "y"}, {{"x", "NeverSeen", "y"}}, init);
    const Tensor b = enc.forward({"x", "y"}, {{"x", kUnknownRelation, "y"}}, init);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_NE(ps.find("g.layer0.rel.<unk-rel>"), nullptr);
}

TEST(Rgcn, EmptyGraphAndShapeErrors) {
    Rng rng(11);
    ParameterStore ps;
    RgcnEncoder enc(ps, "g", 3, 2, {"R"}, rng);
    const Tensor out = enc.forward({}, {}, Tensor::zeros({0, 3}));
    EXPECT_EQ(out.rows(), 0u);
    EXPECT_EQ(out.cols(), 3u);
    EXPECT_THROW(enc.forward({"a", "b"}, {}, Tensor::zeros({2, 4})), DimensionError);
    EXPECT_THROW(enc.forward({"a", "b"}, {}, Tensor::zeros({3, 3})), DimensionError);
}

TEST(NodeFeatures, MeanOfTokenEmbeddings) {
    const Tensor table = Tensor::from({4, 2}, {9, 9, 1, 2, 3, 6, -1, 0});
    const std::map<std::string, std::size_t> ids{{"knife", 1}, {"cutting", 2}, {"board", 3}};
    auto id = [&](const std::string& t) {
        auto it = ids.find(t);
        return it == ids.end() ? std::size_t{0} : it->second;
    };
    const Tensor f = init_node_features({"knife", "cutting board", "zzz qqq"}, table, id);
    EXPECT_EQ(f.at(0, 0), 1.0);
    EXPECT_EQ(f.at(0, 1), 2.0);
    EXPECT_EQ(f.at(1, 0), 1.0);
    EXPECT_EQ(f.at(1, 1), 3.0);
    EXPECT_EQ(f.at(2, 0), 9.0);
    EXPECT_EQ(f.at(2, 1), 9.0);
}

TEST(EmbedGraph, ViewsPartitionNonAnchorRows) {
    EntityAttributeKG kg;
    kg.anchors = {"cut"};
    kg.entities = {{"knife", 0.9}, {"blade", 0.8}};
    kg.attributes = {{"length", 0.7}};
    kg.edges = {{"cut", "RelatedTo", "knife"}, {"knife", "HasProperty", "length"}, {"blade", "HasProperty", "length"}};
    const Tensor table = Tensor::from({5, 2}, {0, 0, 1, 0, 0, 1, 1, 1, -1, 1});
    const std::map<std::string, std::size_t> ids{{"cut", 1}, {"knife", 2}, {"blade", 3}, {"length", 4}};
    auto id = [&](const std::string& t) { return ids.count(t) ? ids.at(t) : std::size_t{0}; };
    Rng rng(3);
    ParameterStore ps;
    RgcnEncoder enc(ps, "g", 2, 2, {"RelatedTo", "HasProperty"}, rng);
    const GraphEmbedding ge = embed_graph(kg, enc, table, id);
    EXPECT_EQ(ge.order, (std::vector<std::string>{"cut", "knife", "blade", "length"}));
    EXPECT_EQ(ge.entity_rows, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(ge.attribute_rows, std::vector<std::size_t>{3});
    ASSERT_EQ(ge.entities.rows(), 2u);
    ASSERT_EQ(ge.attributes.rows(), 1u);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(ge.entities.at(0, k), ge.matrix.at(1, k));
        EXPECT_EQ(ge.attributes.at(0, k), ge.matrix.at(3, k));
    }
    const GraphEmbedding empty = embed_graph({}, enc, table, id);
    EXPECT_EQ(empty.entities.rows(), 0u);
    EXPECT_EQ(empty.attributes.cols(), 2u);
}
