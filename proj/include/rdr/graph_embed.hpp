#pragma once

// The Deliberation channel: translation-based node/relation embeddings,
// subgraph aggregation into a single knowledge vector, closeness-threshold
// link prediction with MRR/hits@k, and the differentiable margin ranking loss
// that trains the embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/kg.hpp"
#include "rdr/rng.hpp"
#include "rdr/subgraph.hpp"
#include "rdr/tensor.hpp"

namespace rdr {

struct GraphEmbeddingModel {
    Tensor node_embeddings;     // [num_nodes, dim]
    Tensor relation_embeddings; // [num_relations, dim]
    int dim = 0;

    static GraphEmbeddingModel init(ParamRegistry& registry, const std::string& prefix,
                                    std::size_t num_nodes, std::size_t num_relations,
                                    int dim, Rng& rng) {
        if (dim < 1) throw argument_error("graph model: dimension must be >= 1");
        GraphEmbeddingModel m;
        m.dim = dim;
        m.node_embeddings =
            registry.create(prefix + ".node_embeddings",
                            {num_nodes, static_cast<std::size_t>(dim)}, rng);
        m.relation_embeddings =
            registry.create(prefix + ".relation_embeddings",
                            {num_relations, static_cast<std::size_t>(dim)}, rng);
        return m;
    }

    std::size_t num_nodes() const { return node_embeddings.rows(); }
    std::size_t num_relations() const { return relation_embeddings.rows(); }
};

struct LinkPredConfig {
    std::optional<double> tau;  // closeness threshold; unset = median heuristic
    double margin = 1.0;
    int negatives_per_positive = 4;
    std::vector<int> hits_k = {1, 3};

    void validate() const {
        if (tau && !(*tau >= 0.0))
            throw argument_error("link config: tau must be >= 0");
        if (!(margin > 0.0))
            throw argument_error("link config: margin must be > 0");
        if (negatives_per_positive < 1)
            throw argument_error("link config: negatives_per_positive must be >= 1");
        for (int k : hits_k)
            if (k < 1) throw argument_error("link config: hits@k requires k >= 1");
    }
};

struct LinkMetrics {
    double mrr = 0.0;
    std::vector<std::pair<int, double>> hits_at_k;       // ascending k
    std::vector<std::pair<int, int>> predicted_edges;    // unordered pairs, i < j
    double tau_used = 0.0;
};

// ||h + r - t||_2 as a differentiable graph node.
inline Tensor transe_score(const GraphEmbeddingModel& m, const Triple& t) {
    Tensor h = row(m.node_embeddings, static_cast<std::size_t>(t.head));
    Tensor r = row(m.relation_embeddings, static_cast<std::size_t>(t.rel));
    Tensor tl = row(m.node_embeddings, static_cast<std::size_t>(t.tail));
    return l2norm(sub(add(h, r), tl));
}

// Same score on frozen values; the evaluation path never builds graph nodes.
inline double transe_score_value(const GraphEmbeddingModel& m, const Triple& t) {
    if (t.head < 0 || static_cast<std::size_t>(t.head) >= m.num_nodes() ||
        t.tail < 0 || static_cast<std::size_t>(t.tail) >= m.num_nodes())
        throw lookup_error("transe_score: node id out of range");
    if (t.rel < 0 || static_cast<std::size_t>(t.rel) >= m.num_relations())
        throw lookup_error("transe_score: relation id out of range");
    const int d = m.dim;
    const auto e = m.node_embeddings.values();
    const auto r = m.relation_embeddings.values();
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double v = e[static_cast<std::size_t>(t.head) * d + j] +
                         r[static_cast<std::size_t>(t.rel) * d + j] -
                         e[static_cast<std::size_t>(t.tail) * d + j];
        s += v * v;
    }
    return std::sqrt(s);
}

inline double node_distance_value(const GraphEmbeddingModel& m, int a, int b) {
    const int d = m.dim;
    const auto e = m.node_embeddings.values();
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double v = e[static_cast<std::size_t>(a) * d + j] -
                         e[static_cast<std::size_t>(b) * d + j];
        s += v * v;
    }
    return std::sqrt(s);
}

// Mean of the subgraph's node embeddings; an empty subgraph contributes the
// zero vector so entity-free texts still train through the other losses.
inline Tensor aggregate(const GraphEmbeddingModel& m, const Subgraph& sub) {
    if (sub.nodes.empty()) return Tensor::zeros({static_cast<std::size_t>(m.dim)});
    return mean_rows(rows(m.node_embeddings, sub.nodes));
}

// All unordered node pairs whose embedding distance is <= tau.
inline std::vector<std::pair<int, int>> predict_links(const GraphEmbeddingModel& m,
                                                      const Subgraph& sub, double tau) {
    if (!(tau >= 0.0)) throw argument_error("predict_links: tau must be >= 0");
    std::vector<std::pair<int, int>> edges;
    for (std::size_t a = 0; a < sub.nodes.size(); ++a)
        for (std::size_t b = a + 1; b < sub.nodes.size(); ++b)
            if (node_distance_value(m, sub.nodes[a], sub.nodes[b]) <= tau)
                edges.emplace_back(sub.nodes[a], sub.nodes[b]);
    return edges;
}

// Median pairwise node distance within the subgraph; the default "set
// empirically" closeness threshold.
inline double median_pairwise_distance(const GraphEmbeddingModel& m, const Subgraph& sub) {
    std::vector<double> dists;
    for (std::size_t a = 0; a < sub.nodes.size(); ++a)
        for (std::size_t b = a + 1; b < sub.nodes.size(); ++b)
            dists.push_back(node_distance_value(m, sub.nodes[a], sub.nodes[b]));
    if (dists.empty()) return 0.0;
    std::sort(dists.begin(), dists.end());
    const std::size_t n = dists.size();
    if (n % 2 == 1) return dists[n / 2];
    return 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

// Ranks the true tail of each subgraph triple among all subgraph nodes as
// candidate tails, by ascending score with node-id tie-breaking.
inline LinkMetrics link_metrics(const GraphEmbeddingModel& m, const Subgraph& sub,
                                const LinkPredConfig& config) {
    config.validate();
    if (sub.triples.empty() || sub.nodes.size() < 2)
        throw metrics_error("link_metrics: subgraph needs >= 1 triple and >= 2 nodes");

    double mrr_sum = 0.0;
    std::vector<int> ks(config.hits_k);
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    std::vector<std::size_t> hit_counts(ks.size(), 0);

    std::vector<std::pair<double, int>> ranked;
    for (const Triple& t : sub.triples) {
        ranked.clear();
        for (int cand : sub.nodes)
            ranked.emplace_back(transe_score_value(m, {t.head, t.rel, cand}), cand);
        std::sort(ranked.begin(), ranked.end());
        std::size_t rank = 0;
        for (std::size_t i = 0; i < ranked.size(); ++i)
            if (ranked[i].second == t.tail) {
                rank = i + 1;
                break;
            }
        mrr_sum += 1.0 / static_cast<double>(rank);
        for (std::size_t i = 0; i < ks.size(); ++i)
            if (rank <= static_cast<std::size_t>(ks[i])) ++hit_counts[i];
    }

    LinkMetrics out;
    const double nq = static_cast<double>(sub.triples.size());
    out.mrr = mrr_sum / nq;
    for (std::size_t i = 0; i < ks.size(); ++i)
        out.hits_at_k.emplace_back(ks[i], static_cast<double>(hit_counts[i]) / nq);
    out.tau_used = config.tau ? *config.tau : median_pairwise_distance(m, sub);
    out.predicted_edges = predict_links(m, sub, out.tau_used);
    return out;
}

// A corrupted copy of each true triple; head or tail replaced by a node drawn
// uniformly from the subgraph.
struct Corruption {
    Triple original;
    Triple corrupted;
};

inline std::vector<Corruption> sample_corruptions(const Subgraph& sub,
                                                  int negatives_per_positive, Rng& rng) {
    std::vector<Corruption> out;
    if (sub.nodes.empty()) return out;
    out.reserve(sub.triples.size() * static_cast<std::size_t>(negatives_per_positive));
    for (const Triple& t : sub.triples)
        for (int j = 0; j < negatives_per_positive; ++j) {
            const bool corrupt_head = rng.coin();
            const int repl = sub.nodes[static_cast<std::size_t>(rng.below(sub.nodes.size()))];
            Triple c = t;
            if (corrupt_head)
                c.head = repl;
            else
                c.tail = repl;
            out.push_back({t, c});
        }
    return out;
}

// Margin ranking loss: mean over corruptions of
// max(0, margin + score(true) - score(corrupted)).
inline Tensor gel_loss(const GraphEmbeddingModel& m, const std::vector<Corruption>& corruptions,
                       double margin) {
    if (corruptions.empty()) return Tensor::scalar_const(0.0);
    std::vector<Tensor> terms;
    terms.reserve(corruptions.size());
    for (const Corruption& c : corruptions) {
        Tensor st = transe_score(m, c.original);
        Tensor sc = transe_score(m, c.corrupted);
        terms.push_back(relu(add_const(sub(st, sc), margin)));
    }
    return scale(sum_scalars(terms), 1.0 / static_cast<double>(terms.size()));
}

inline Tensor gel_loss(const GraphEmbeddingModel& m, const Subgraph& sub,
                       const LinkPredConfig& config, Rng& rng) {
    config.validate();
    if (sub.nodes.empty())
        throw argument_error("gel_loss: empty subgraph (callers contribute 0 instead)");
    auto corruptions = sample_corruptions(sub, config.negatives_per_positive, rng);
    return gel_loss(m, corruptions, config.margin);
}

// Writes every node and relation vector as its own checkpoint line, named by
// the graph's surface strings.
inline void export_embeddings(const GraphEmbeddingModel& m, const KnowledgeGraph& kg,
                              const std::string& path) {
    ParamRegistry reg;
    const std::size_t d = static_cast<std::size_t>(m.dim);
    for (std::size_t i = 0; i < kg.node_count(); ++i) {
        std::vector<double> v(d);
        for (std::size_t j = 0; j < d; ++j) v[j] = m.node_embeddings.at(i, j);
        reg.create_from("node:" + kg.node_name(static_cast<int>(i)), {d}, std::move(v));
    }
    for (std::size_t i = 0; i < kg.relation_count(); ++i) {
        std::vector<double> v(d);
        for (std::size_t j = 0; j < d; ++j) v[j] = m.relation_embeddings.at(i, j);
        reg.create_from("relation:" + kg.relation_name(static_cast<int>(i)), {d}, std::move(v));
    }
    save_checkpoint(reg, path);
}

} // namespace rdr
