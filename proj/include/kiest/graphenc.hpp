#pragma once

// Relational graph convolution over the entity-attribute graph.

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kiest/numerics/nn.hpp"
#include "kiest/selector.hpp"

namespace kiest {

inline constexpr const char* kUnknownRelation = "<unk-rel>";

// Row-vector form: H' = ReLU(H W0 + sum_r mean_{j in N_r(i)} H_j W_r).
struct RgcnLayer {
    Tensor self;
    std::map<std::string, Tensor> relation;  // includes kUnknownRelation

    const Tensor& weight(const std::string& rel) const {
        auto it = relation.find(rel);
        return it == relation.end() ? relation.at(kUnknownRelation) : it->second;
    }
};

struct GraphEmbedding {
    std::vector<std::string> order;
    Tensor matrix;  // |order| x d; undefined when the graph is empty
    std::vector<std::size_t> entity_rows;
    std::vector<std::size_t> attribute_rows;
    Tensor entities;    // C_e, 0 x d when empty
    Tensor attributes;  // C_a, 0 x d when empty
};

// Undirected neighbor lists grouped by relation. Neighbors are sorted by node name
// so that summation order does not depend on node numbering.
inline std::map<std::string, Aggregation> relation_aggregations(const std::vector<std::string>& order,
                                                                const std::vector<Edge>& edges) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < order.size(); ++i) index.emplace(order[i], i);
    std::map<std::string, std::vector<std::set<std::string>>> nbrs;
    for (const auto& e : edges) {
        auto h = index.find(e.head), t = index.find(e.tail);
        if (h == index.end() || t == index.end() || h->second == t->second) continue;
        auto& lists = nbrs[e.relation];
        if (lists.empty()) lists.resize(order.size());
        lists[h->second].insert(e.tail);
        lists[t->second].insert(e.head);
    }
    std::map<std::string, Aggregation> out;
    for (const auto& [rel, lists] : nbrs) {
        Aggregation agg;
        agg.rows.resize(order.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            const double w = lists[i].empty() ? 0.0 : 1.0 / static_cast<double>(lists[i].size());
            for (const auto& n : lists[i]) agg.rows[i].push_back({index.at(n), w});
        }
        out.emplace(rel, std::move(agg));
    }
    return out;
}

class RgcnEncoder {
public:
    RgcnEncoder() = default;
    RgcnEncoder(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t n_layers,
                const std::set<std::string>& relations, Rng& rng)
        : d_(d) {
        std::set<std::string> rels = relations;
        rels.insert(kUnknownRelation);
        for (std::size_t l = 0; l < n_layers; ++l) {
            RgcnLayer layer;
            const std::string p = name + ".layer" + std::to_string(l);
            layer.self = ps.add_uniform(p + ".self", {d, d}, d, rng);
            for (const auto& r : rels) layer.relation.emplace(r, ps.add_uniform(p + ".rel." + r, {d, d}, d, rng));
            layers_.push_back(std::move(layer));
        }
    }

    std::size_t dim() const { return d_; }
    std::vector<RgcnLayer>& layers() { return layers_; }
    const std::vector<RgcnLayer>& layers() const { return layers_; }

    Tensor forward(const std::vector<std::string>& order, const std::vector<Edge>& edges, const Tensor& init) const {
        if (order.empty()) return Tensor::zeros({0, d_});
        if (init.ndim() != 2 || init.rows() != order.size() || init.cols() != d_) {
            throw DimensionError("rgcn: features " + shape_str(init.shape()) + " do not match " +
                                 std::to_string(order.size()) + " nodes of width " + std::to_string(d_));
        }
        const auto aggs = relation_aggregations(order, edges);
        Tensor h = init;
        for (const auto& layer : layers_) {
            Tensor acc = matmul(h, layer.self);
            for (const auto& [rel, agg] : aggs) acc = add(acc, aggregate(matmul(h, layer.weight(rel)), agg));
            h = relu(acc);
        }
        return h;
    }

private:
    std::size_t d_ = 0;
    std::vector<RgcnLayer> layers_;
};

// Mean of each node's token embeddings; unknown tokens map to `unk_id`.
inline Tensor init_node_features(const std::vector<std::string>& order, const Tensor& table,
                                 const std::function<std::size_t(const std::string&)>& token_id) {
    Aggregation agg;
    agg.rows.resize(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto toks = split_whitespace(order[i]);
        if (toks.empty()) toks.push_back(order[i]);
        for (const auto& t : toks) agg.rows[i].push_back({token_id(t), 1.0 / static_cast<double>(toks.size())});
    }
    return aggregate(table, agg);
}

inline GraphEmbedding embed_graph(const EntityAttributeKG& kg, const RgcnEncoder& enc, const Tensor& table,
                                  const std::function<std::size_t(const std::string&)>& token_id) {
    GraphEmbedding ge;
    ge.order = kg.nodes();
    const std::size_t d = enc.dim();
    if (ge.order.empty()) {
        ge.entities = Tensor::zeros({0, d});
        ge.attributes = Tensor::zeros({0, d});
        return ge;
    }
    ge.matrix = enc.forward(ge.order, kg.edges, init_node_features(ge.order, table, token_id));
    const std::size_t na = kg.anchors.size(), ne = kg.entities.size();
    for (std::size_t i = 0; i < ne; ++i) ge.entity_rows.push_back(na + i);
    for (std::size_t i = 0; i < kg.attributes.size(); ++i) ge.attribute_rows.push_back(na + ne + i);
    ge.entities = ne ? gather_rows(ge.matrix, ge.entity_rows) : Tensor::zeros({0, d});
    ge.attributes = kg.attributes.empty() ? Tensor::zeros({0, d}) : gather_rows(ge.matrix, ge.attribute_rows);
    return ge;
}

}  // namespace kiest
