#pragma once

// Concept graph storage, anchor matching and H-hop retrieval.

#include <algorithm>
#include <deque>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "kiest/error.hpp"
#include "kiest/text.hpp"

namespace kiest {

struct Edge {
    std::string head;
    std::string relation;
    std::string tail;

    friend auto operator<=>(const Edge&, const Edge&) = default;
};

// Directed labeled concept graph. Retrieval treats edges as undirected.
class KnowledgeGraph {
public:
    using ConceptId = std::size_t;

    struct Incidence {
        ConceptId neighbor;
        std::size_t edge;
    };

    // Returns false when the (normalized) triple is already present.
    bool add_edge(std::string_view head, std::string_view relation, std::string_view tail) {
        const ConceptId h = intern(normalize_text(head));
        const ConceptId t = intern(normalize_text(tail));
        std::string rel = collapse_whitespace(relation);
        if (!triples_.insert({h, rel, t}).second) return false;
        const std::size_t e = edges_.size();
        edges_.push_back({names_[h], rel, names_[t]});
        edge_ids_.push_back({h, t});
        adjacency_[h].push_back({t, e});
        if (h != t) adjacency_[t].push_back({h, e});
        relations_.insert(rel);
        return true;
    }

    ConceptId add_concept(std::string_view node) { return intern(normalize_text(node)); }

    bool contains(std::string_view node) const { return ids_.count(std::string(node)) > 0; }

    std::optional<ConceptId> id_of(std::string_view node) const {
        auto it = ids_.find(std::string(node));
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& name(ConceptId id) const { return names_[id]; }
    std::size_t concept_count() const { return names_.size(); }
    std::size_t edge_count() const { return edges_.size(); }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::vector<Incidence>& incident(ConceptId id) const { return adjacency_[id]; }
    std::pair<ConceptId, ConceptId> endpoints(std::size_t edge) const { return edge_ids_[edge]; }
    const std::set<std::string>& relations() const { return relations_; }

    std::vector<std::string> concepts_sorted() const {
        std::vector<std::string> out = names_;
        std::sort(out.begin(), out.end());
        return out;
    }

    std::size_t max_concept_tokens() const {
        std::size_t m = 0;
        for (const auto& n : names_) m = std::max(m, split_whitespace(n).size());
        return m;
    }

private:
    ConceptId intern(std::string node) {
        auto it = ids_.find(node);
        if (it != ids_.end()) return it->second;
        const ConceptId id = names_.size();
        ids_.emplace(node, id);
        names_.push_back(std::move(node));
        adjacency_.emplace_back();
        return id;
    }

    std::vector<std::string> names_;
    std::unordered_map<std::string, ConceptId> ids_;
    std::vector<Edge> edges_;
    std::vector<std::pair<ConceptId, ConceptId>> edge_ids_;
    std::vector<std::vector<Incidence>> adjacency_;
    std::set<std::tuple<ConceptId, std::string, ConceptId>> triples_;
    std::set<std::string> relations_;
};

// Parses head<TAB>relation<TAB>tail lines; blank and '#' lines are skipped.
inline KnowledgeGraph parse_graph(std::istream& in) {
    KnowledgeGraph kg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (collapse_whitespace(line).empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 3) {
            throw ParseError("expected head<TAB>relation<TAB>tail, got " + std::to_string(fields.size()) + " fields", lineno);
        }
        for (const auto& f : fields) {
            if (collapse_whitespace(f).empty()) throw ParseError("empty field in edge", lineno);
        }
        kg.add_edge(fields[0], fields[1], fields[2]);
    }
    return kg;
}

inline KnowledgeGraph load_graph(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open edge list " + path);
    return parse_graph(f);
}

// Emits the edge list in lexicographic (head, relation, tail) order.
inline void export_graph(const KnowledgeGraph& kg, std::ostream& out) {
    std::vector<Edge> edges = kg.edges();
    std::sort(edges.begin(), edges.end());
    for (const auto& e : edges) out << e.head << '\t' << e.relation << '\t' << e.tail << '\n';
}

inline std::string export_graph(const KnowledgeGraph& kg) {
    std::ostringstream os;
    export_graph(kg, os);
    return os.str();
}

struct Anchor {
    std::string text;
    std::size_t start = 0;  // first token
    std::size_t end = 0;    // one past the last token

    friend auto operator<=>(const Anchor&, const Anchor&) = default;
};

using AnchorSet = std::vector<Anchor>;

// Every n-gram (n <= max_ngram) of the token sequence that is a concept,
// overlapping spans included, ordered by (start, end).
inline AnchorSet extract_anchors(const std::vector<std::string>& tokens, const KnowledgeGraph& kg, std::size_t max_ngram = 4) {
    if (max_ngram < 1) throw ContractError("max_ngram must be >= 1");
    std::set<Anchor> found;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        std::string span;
        for (std::size_t n = 1; n <= max_ngram && i + n <= tokens.size(); ++n) {
            if (n > 1) span += ' ';
            span += to_lower_ascii(tokens[i + n - 1]);
            const std::string key = collapse_whitespace(span);
            if (kg.contains(key)) found.insert({key, i, i + n});
        }
    }
    AnchorSet out(found.begin(), found.end());
    std::sort(out.begin(), out.end(), [](const Anchor& a, const Anchor& b) {
        return std::tie(a.start, a.end, a.text) < std::tie(b.start, b.end, b.text);
    });
    return out;
}

struct RetrievedSet {
    std::vector<std::string> anchors;            // distinct anchor concepts, sorted
    std::map<std::string, std::size_t> hop_of;   // C_x member -> minimal hop distance
    std::vector<Edge> edges;                     // induced on anchors + C_x, sorted

    std::vector<std::string> concepts() const {
        std::vector<std::string> out;
        out.reserve(hop_of.size());
        for (const auto& [c, h] : hop_of) out.push_back(c);
        return out;
    }
    bool contains(const std::string& c) const { return hop_of.count(c) > 0; }
};

// Undirected BFS from all anchors to depth H; anchors are not part of C_x.
inline RetrievedSet retrieve(const AnchorSet& anchors, const KnowledgeGraph& kg, std::size_t hops) {
    if (hops < 1) throw ContractError("retrieve needs H >= 1");
    RetrievedSet out;
    std::set<std::string> anchor_names;
    for (const auto& a : anchors) anchor_names.insert(a.text);
    std::unordered_map<KnowledgeGraph::ConceptId, std::size_t> dist;
    std::deque<KnowledgeGraph::ConceptId> frontier;
    for (const auto& name : anchor_names) {
        auto id = kg.id_of(name);
        if (!id) continue;
        out.anchors.push_back(name);
        dist.emplace(*id, 0);
        frontier.push_back(*id);
    }
    while (!frontier.empty()) {
        const auto u = frontier.front();
        frontier.pop_front();
        const std::size_t du = dist[u];
        if (du == hops) continue;
        for (const auto& inc : kg.incident(u)) {
            if (dist.emplace(inc.neighbor, du + 1).second) frontier.push_back(inc.neighbor);
        }
    }
    std::set<std::size_t> edge_ids;
    for (const auto& [id, d] : dist) {
        if (d > 0) out.hop_of.emplace(kg.name(id), d);
        for (const auto& inc : kg.incident(id)) {
            if (dist.count(inc.neighbor)) edge_ids.insert(inc.edge);
        }
    }
    for (auto e : edge_ids) out.edges.push_back(kg.edges()[e]);
    std::sort(out.edges.begin(), out.edges.end());
    return out;
}

}  // namespace kiest
