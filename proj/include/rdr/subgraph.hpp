#pragma once

// Text-to-subgraph extraction: whitespace tokenization, greedy longest-match
// entity linking against the KG node vocabulary (spans up to three tokens),
// and undirected k-hop BFS producing the induced subgraph around the matched
// entities.

#include <algorithm>
#include <cctype>
#include <deque>
#include <ostream>
#include <string>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/kg.hpp"

namespace rdr {

struct TokenizedText {
    std::string original;
    std::vector<std::string> tokens;
    std::vector<int> ids; // assigned under a task vocabulary; empty until then
};

// Lowercases, splits on whitespace, strips leading/trailing ASCII punctuation
// from each token, and drops tokens that end up empty.
inline TokenizedText tokenize(const std::string& text) {
    TokenizedText out;
    out.original = text;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i == start) continue;
        std::size_t b = start, e = i;
        while (b < e && std::ispunct(static_cast<unsigned char>(text[b]))) ++b;
        while (e > b && std::ispunct(static_cast<unsigned char>(text[e - 1]))) --e;
        if (b == e) continue;
        std::string tok;
        tok.reserve(e - b);
        for (std::size_t j = b; j < e; ++j)
            tok += static_cast<char>(std::tolower(static_cast<unsigned char>(text[j])));
        out.tokens.push_back(std::move(tok));
    }
    return out;
}

struct EntityMatch {
    int node = -1;
    std::size_t begin = 0; // token index, inclusive
    std::size_t end = 0;   // token index, exclusive
};

// Greedy longest-match left to right: at each position spans of length
// max_span down to 1 are tried (tokens joined with underscores); a hit
// records the node and advances past the span, so matches never overlap.
inline std::vector<EntityMatch> match_entities(const TokenizedText& text,
                                               const KnowledgeGraph& kg, int max_span = 3) {
    if (max_span < 1)
        throw argument_error("match_entities: max_span must be >= 1");
    std::vector<EntityMatch> matches;
    const std::size_t n = text.tokens.size();
    std::size_t i = 0;
    while (i < n) {
        std::size_t limit = std::min<std::size_t>(static_cast<std::size_t>(max_span), n - i);
        bool hit = false;
        for (std::size_t span = limit; span >= 1; --span) {
            std::string candidate = text.tokens[i];
            for (std::size_t j = 1; j < span; ++j) {
                candidate += '_';
                candidate += text.tokens[i + j];
            }
            int node = kg.node_id(candidate);
            if (node >= 0) {
                matches.push_back({node, i, i + span});
                i += span;
                hit = true;
                break;
            }
        }
        if (!hit) ++i;
    }
    return matches;
}

struct Subgraph {
    std::vector<int> seed_entities; // sorted, deduplicated
    std::vector<int> nodes;         // sorted; all within hop_threshold of a seed
    std::vector<Triple> triples;    // induced edge set, in KG triple order
    int hop_threshold = 0;
    int unresolved_seeds = 0;

    bool empty() const { return nodes.empty(); }
};

// Undirected BFS to depth hop_threshold from the seed set; the triple list is
// exactly the KG edges with both endpoints inside the reached node set. Seeds
// that do not resolve in the graph are dropped and counted.
inline Subgraph extract_subgraph(const std::vector<int>& seeds, const KnowledgeGraph& kg,
                                 int hop_threshold) {
    if (hop_threshold < 0)
        throw argument_error("extract_subgraph: hop threshold must be >= 0");

    Subgraph sub;
    sub.hop_threshold = hop_threshold;

    const std::size_t n = kg.node_count();
    std::vector<int> dist(n, -1);
    std::deque<int> queue;
    for (int s : seeds) {
        if (s < 0 || static_cast<std::size_t>(s) >= n) {
            ++sub.unresolved_seeds;
            continue;
        }
        if (dist[static_cast<std::size_t>(s)] == -1) {
            dist[static_cast<std::size_t>(s)] = 0;
            queue.push_back(s);
            sub.seed_entities.push_back(s);
        }
    }
    std::sort(sub.seed_entities.begin(), sub.seed_entities.end());

    while (!queue.empty()) {
        int u = queue.front();
        queue.pop_front();
        int du = dist[static_cast<std::size_t>(u)];
        if (du >= hop_threshold) continue;
        auto visit = [&](int v) {
            if (dist[static_cast<std::size_t>(v)] == -1) {
                dist[static_cast<std::size_t>(v)] = du + 1;
                queue.push_back(v);
            }
        };
        for (int idx : kg.out_triples(u)) visit(kg.triples()[static_cast<std::size_t>(idx)].tail);
        for (int idx : kg.in_triples(u)) visit(kg.triples()[static_cast<std::size_t>(idx)].head);
    }

    std::vector<char> inside(n, 0);
    for (std::size_t v = 0; v < n; ++v)
        if (dist[v] >= 0) {
            inside[v] = 1;
            sub.nodes.push_back(static_cast<int>(v));
        }

    // induced edges, scanned from the head side so each triple appears once
    std::vector<int> triple_ids;
    for (int v : sub.nodes)
        for (int idx : kg.out_triples(v))
            if (inside[static_cast<std::size_t>(kg.triples()[static_cast<std::size_t>(idx)].tail)])
                triple_ids.push_back(idx);
    std::sort(triple_ids.begin(), triple_ids.end());
    for (int idx : triple_ids) sub.triples.push_back(kg.triples()[static_cast<std::size_t>(idx)]);
    return sub;
}

struct ExtractConfig {
    int max_span = 3;
    int hop_threshold = 2;
};

// tokenize -> match_entities -> extract_subgraph
inline Subgraph pipeline_extract(const std::string& text, const KnowledgeGraph& kg,
                                 const ExtractConfig& cfg = {}) {
    TokenizedText toks = tokenize(text);
    std::vector<int> seeds;
    for (const EntityMatch& m : match_entities(toks, kg, cfg.max_span))
        seeds.push_back(m.node);
    return extract_subgraph(seeds, kg, cfg.hop_threshold);
}

// Triple-file dump with a comment header; re-loadable by load_triples.
inline void dump_subgraph(const Subgraph& sub, const KnowledgeGraph& kg, std::ostream& out) {
    out << "# seeds:";
    for (int s : sub.seed_entities) out << ' ' << kg.node_name(s);
    out << '\n';
    out << "# hop_threshold: " << sub.hop_threshold << '\n';
    out << "# nodes: " << sub.nodes.size() << '\n';
    for (const Triple& t : sub.triples)
        out << kg.node_name(t.head) << '\t' << kg.relation_name(t.rel) << '\t'
            << kg.node_name(t.tail) << '\n';
}

} // namespace rdr
