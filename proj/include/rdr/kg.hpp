#pragma once

// Knowledge-graph triple store: ingestion from tab-separated files, the
// 35-relation canonical vocabulary, per-run fractional sampling, and the
// adjacency structure the subgraph extractor walks.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"
#include "rdr/tensor.hpp"

namespace rdr {

struct Triple {
    int head = -1;
    int rel = -1;
    int tail = -1;

    friend bool operator==(const Triple& a, const Triple& b) {
        return a.head == b.head && a.rel == b.rel && a.tail == b.tail;
    }
};

// The canonical 35-name relation vocabulary, Antonym through UsedFor.
inline const std::vector<std::string>& canonical_relations() {
    static const std::vector<std::string> names = {
        "Antonym",        "DistinctFrom",    "EtymologicallyRelatedTo",
        "LocatedNear",    "RelatedTo",       "SimilarTo",
        "Synonym",        "AtLocation",      "CapableOf",
        "Causes",         "CausesDesire",    "CreatedBy",
        "DefinedAs",      "DerivedFrom",     "Desires",
        "Entails",        "ExternalURL",     "FormOf",
        "HasA",           "HasContext",      "HasFirstSubevent",
        "HasLastSubevent", "HasPrerequisite", "HasProperty",
        "InstanceOf",     "IsA",             "MadeOf",
        "MannerOf",       "MotivatedByGoal", "ObstructedBy",
        "PartOf",         "ReceivesAction",  "SenseOf",
        "SymbolOf",       "UsedFor"};
    return names;
}

inline bool is_canonical_relation(std::string_view name) {
    for (const auto& r : canonical_relations())
        if (r == name) return true;
    return false;
}

class KnowledgeGraph {
public:
    // lowercase, internal spaces replaced by underscores
    static std::string normalize_node(std::string_view raw) {
        std::string out;
        out.reserve(raw.size());
        for (char ch : raw) {
            unsigned char c = static_cast<unsigned char>(ch);
            if (c == ' ')
                out += '_';
            else
                out += static_cast<char>(std::tolower(c));
        }
        return out;
    }

    int add_node(const std::string& name) {
        auto it = node_ids_.find(name);
        if (it != node_ids_.end()) return it->second;
        int id = static_cast<int>(node_names_.size());
        node_ids_.emplace(name, id);
        node_names_.push_back(name);
        out_.emplace_back();
        in_.emplace_back();
        return id;
    }

    int add_relation(const std::string& name) {
        auto it = rel_ids_.find(name);
        if (it != rel_ids_.end()) return it->second;
        int id = static_cast<int>(rel_names_.size());
        rel_ids_.emplace(name, id);
        rel_names_.push_back(name);
        return id;
    }

    // Node names are normalized here; relation names are taken verbatim.
    // Returns false when the triple is already present.
    bool add_triple(std::string_view head, const std::string& rel, std::string_view tail) {
        int h = add_node(normalize_node(head));
        int r = add_relation(rel);
        int t = add_node(normalize_node(tail));
        std::uint64_t key = triple_key(h, r, t);
        if (!triple_set_.insert(key).second) return false;
        int idx = static_cast<int>(triples_.size());
        triples_.push_back({h, r, t});
        out_[static_cast<std::size_t>(h)].push_back(idx);
        in_[static_cast<std::size_t>(t)].push_back(idx);
        return true;
    }

    std::size_t node_count() const { return node_names_.size(); }
    std::size_t relation_count() const { return rel_names_.size(); }
    std::size_t triple_count() const { return triples_.size(); }

    const std::vector<Triple>& triples() const { return triples_; }

    int node_id(std::string_view name) const {
        auto it = node_ids_.find(std::string(name));
        return it == node_ids_.end() ? -1 : it->second;
    }

    int relation_id(std::string_view name) const {
        auto it = rel_ids_.find(std::string(name));
        return it == rel_ids_.end() ? -1 : it->second;
    }

    const std::string& node_name(int id) const {
        check_node(id);
        return node_names_[static_cast<std::size_t>(id)];
    }

    const std::string& relation_name(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= rel_names_.size())
            throw lookup_error("knowledge graph: unknown relation id " + std::to_string(id));
        return rel_names_[static_cast<std::size_t>(id)];
    }

    const std::vector<int>& out_triples(int node) const {
        check_node(node);
        return out_[static_cast<std::size_t>(node)];
    }

    const std::vector<int>& in_triples(int node) const {
        check_node(node);
        return in_[static_cast<std::size_t>(node)];
    }

    // Number of triples incident to the node (head or tail); a self-loop
    // counts once.
    std::size_t degree(int node) const {
        check_node(node);
        std::size_t self_loops = 0;
        for (int idx : out_[static_cast<std::size_t>(node)])
            if (triples_[static_cast<std::size_t>(idx)].tail == node) ++self_loops;
        return out_[static_cast<std::size_t>(node)].size() +
               in_[static_cast<std::size_t>(node)].size() - self_loops;
    }

    // String triples sorted lexicographically by (head, relation, tail); the
    // canonical order that sampling and graph equality key off.
    std::vector<std::array<std::string, 3>> canonical_string_triples() const {
        std::vector<std::array<std::string, 3>> out;
        out.reserve(triples_.size());
        for (const Triple& t : triples_)
            out.push_back({node_name(t.head), relation_name(t.rel), node_name(t.tail)});
        std::sort(out.begin(), out.end());
        return out;
    }

    friend bool operator==(const KnowledgeGraph& a, const KnowledgeGraph& b) {
        return a.canonical_string_triples() == b.canonical_string_triples();
    }

private:
    void check_node(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= node_names_.size())
            throw lookup_error("knowledge graph: unknown node id " + std::to_string(id));
    }

    std::uint64_t triple_key(int h, int r, int t) const {
        // 21 bits per id; guard so a larger graph cannot alias keys silently
        if (h >= (1 << 21) || r >= (1 << 21) || t >= (1 << 21))
            throw argument_error("knowledge graph: id exceeds the 2^21 dedup limit");
        return (static_cast<std::uint64_t>(h) << 42) |
               (static_cast<std::uint64_t>(r) << 21) | static_cast<std::uint64_t>(t);
    }

    std::vector<std::string> node_names_;
    std::unordered_map<std::string, int> node_ids_;
    std::vector<std::string> rel_names_;
    std::unordered_map<std::string, int> rel_ids_;
    std::vector<Triple> triples_;
    std::unordered_set<std::uint64_t> triple_set_;
    std::vector<std::vector<int>> out_;
    std::vector<std::vector<int>> in_;
};

struct LoadReport {
    std::size_t lines = 0;
    std::size_t triples = 0;
    std::size_t nodes = 0;
    std::size_t relations = 0;
    std::size_t duplicates = 0;
    std::size_t flagged_lines = 0;
    std::set<std::string> flagged_relations;

    std::string to_kv() const {
        std::string out;
        out += "lines = " + std::to_string(lines) + "\n";
        out += "triples = " + std::to_string(triples) + "\n";
        out += "nodes = " + std::to_string(nodes) + "\n";
        out += "relations = " + std::to_string(relations) + "\n";
        out += "duplicates = " + std::to_string(duplicates) + "\n";
        out += "flagged_lines = " + std::to_string(flagged_lines) + "\n";
        out += "flagged_relations =";
        bool first = true;
        for (const auto& r : flagged_relations) {
            out += first ? " " : ",";
            out += r;
            first = false;
        }
        out += "\n";
        return out;
    }
};

struct LoadResult {
    KnowledgeGraph kg;
    LoadReport report;
};

// One triple per line, tab-separated `head <TAB> relation <TAB> tail`;
// '#'-prefixed and blank lines are skipped. Under strict_relations a relation
// outside the canonical 35 aborts the load; otherwise it is admitted and
// counted in the report.
inline LoadResult load_triples_stream(std::istream& in, bool strict_relations) {
    LoadResult result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        ++result.report.lines;
        auto fields = detail::split_view(line, '\t');
        if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
            throw parse_error("triple file line " + std::to_string(lineno) +
                              ": expected `head<TAB>relation<TAB>tail`");
        std::string rel(fields[1]);
        if (!is_canonical_relation(rel)) {
            if (strict_relations)
                throw vocabulary_error("triple file line " + std::to_string(lineno) +
                                       ": unknown relation '" + rel + "'");
            ++result.report.flagged_lines;
            result.report.flagged_relations.insert(rel);
        }
        if (!result.kg.add_triple(fields[0], rel, fields[2])) ++result.report.duplicates;
    }
    result.report.triples = result.kg.triple_count();
    result.report.nodes = result.kg.node_count();
    result.report.relations = result.kg.relation_count();
    return result;
}

inline LoadResult load_triples(const std::string& path, bool strict_relations = false) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw argument_error("load_triples: cannot open '" + path + "'");
    return load_triples_stream(f, strict_relations);
}

inline void save_triples(const KnowledgeGraph& kg, std::ostream& out) {
    for (const Triple& t : kg.triples())
        out << kg.node_name(t.head) << '\t' << kg.relation_name(t.rel) << '\t'
            << kg.node_name(t.tail) << '\n';
}

inline void save_triples(const KnowledgeGraph& kg, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw argument_error("save_triples: cannot open '" + path + "'");
    save_triples(kg, f);
}

// Uniform sample of round(fraction * |triples|) triples without replacement.
// Sampling operates on the canonical string ordering, so the result depends
// only on the triple set, the fraction, and the seed -- not on file order.
inline KnowledgeGraph sample_fraction(const KnowledgeGraph& kg, double fraction,
                                      std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw argument_error("sample_fraction: fraction must be in (0,1], got " +
                             format_double(fraction));
    auto canonical = kg.canonical_string_triples();
    const std::size_t total = canonical.size();
    const std::size_t keep = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(total)));

    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x5A4D504Cull)); // "SMPL"
    rng.shuffle(order);
    order.resize(keep);
    std::sort(order.begin(), order.end());

    KnowledgeGraph out;
    for (std::size_t idx : order) {
        const auto& t = canonical[idx];
        out.add_triple(t[0], t[1], t[2]);
    }
    return out;
}

} // namespace rdr
