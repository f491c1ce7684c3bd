#pragma once

// The Recap and Respond channels: a per-position reconstruction model that
// produces token logits plus a mean-pooled text embedding, and the
// concatenate-then-affine fusion head that turns the text and knowledge
// vectors into class logits.

#include <string>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"
#include "rdr/tensor.hpp"

namespace rdr {

struct RecapModel {
    Tensor token_embeddings; // [vocab, dim_embed]
    Tensor hidden_weight;    // [dim_embed, dim_hidden]
    Tensor hidden_bias;      // [dim_hidden]
    Tensor output_proj;      // [dim_hidden, vocab]
    int vocab = 0;
    int dim_embed = 0;
    int dim_hidden = 0;

    static RecapModel init(ParamRegistry& registry, const std::string& prefix,
                           int vocab, int dim_embed, int dim_hidden, Rng& rng) {
        if (vocab < 1 || dim_embed < 1 || dim_hidden < 1)
            throw argument_error("recap model: dimensions must be >= 1");
        RecapModel m;
        m.vocab = vocab;
        m.dim_embed = dim_embed;
        m.dim_hidden = dim_hidden;
        const auto V = static_cast<std::size_t>(vocab);
        const auto E = static_cast<std::size_t>(dim_embed);
        const auto H = static_cast<std::size_t>(dim_hidden);
        m.token_embeddings = registry.create(prefix + ".token_embeddings", {V, E}, rng);
        m.hidden_weight = registry.create(prefix + ".hidden_weight", {E, H}, rng);
        m.hidden_bias = registry.create(prefix + ".hidden_bias", {H}, rng);
        m.output_proj = registry.create(prefix + ".output_proj", {H, V}, rng);
        return m;
    }
};

struct RecapOut {
    Tensor logits; // [n, vocab]
    Tensor pooled; // [dim_hidden]; mean of the per-position hidden states
};

// Per-position reconstruction forward: embed -> tanh(hidden) -> vocab logits,
// with the pooled text embedding taken as the mean hidden state. An empty
// token list yields 0xV logits and a zero pooled vector.
inline RecapOut recap_forward(const RecapModel& m, const std::vector<int>& token_ids) {
    for (int id : token_ids)
        if (id < 0 || id >= m.vocab)
            throw vocabulary_error("recap_forward: token id " + std::to_string(id) +
                                   " outside vocabulary of size " + std::to_string(m.vocab));
    RecapOut out;
    if (token_ids.empty()) {
        out.logits = Tensor::zeros({0, static_cast<std::size_t>(m.vocab)});
        out.pooled = Tensor::zeros({static_cast<std::size_t>(m.dim_hidden)});
        return out;
    }
    Tensor x = rows(m.token_embeddings, token_ids);                 // [n, E]
    Tensor hidden = tanh(add_row(matmul(x, m.hidden_weight), m.hidden_bias)); // [n, H]
    out.logits = matmul(hidden, m.output_proj);                     // [n, V]
    out.pooled = mean_rows(hidden);                                 // [H]
    return out;
}

// Paraphrasing/reconstruction loss: mean per-position cross entropy of the
// logits against the input's own tokens. Zero-length input contributes 0.
inline Tensor pl_loss(const Tensor& logits, const std::vector<int>& token_ids) {
    if (token_ids.empty()) return Tensor::scalar_const(0.0);
    return softmax_cross_entropy(logits, token_ids);
}

struct FusionHead {
    Tensor weight; // [dim_hidden + dim_graph, classes]
    Tensor bias;   // [classes]
    int dim_hidden = 0;
    int dim_graph = 0;
    int classes = 0;

    static FusionHead init(ParamRegistry& registry, const std::string& prefix,
                           int dim_hidden, int dim_graph, int classes, Rng& rng) {
        if (dim_hidden < 1 || dim_graph < 1)
            throw argument_error("fusion head: dimensions must be >= 1");
        if (classes < 2)
            throw argument_error("fusion head: need at least 2 classes");
        FusionHead h;
        h.dim_hidden = dim_hidden;
        h.dim_graph = dim_graph;
        h.classes = classes;
        const auto in = static_cast<std::size_t>(dim_hidden + dim_graph);
        const auto C = static_cast<std::size_t>(classes);
        h.weight = registry.create(prefix + ".weight", {in, C}, rng);
        h.bias = registry.create(prefix + ".bias", {C}, rng);
        return h;
    }
};

// z = concat(pooled, e_x) . W + b
inline Tensor fuse_and_classify(const FusionHead& head, const Tensor& pooled,
                                const Tensor& knowledge) {
    if (pooled.rank() != 1 || static_cast<int>(pooled.size()) != head.dim_hidden ||
        knowledge.rank() != 1 || static_cast<int>(knowledge.size()) != head.dim_graph)
        throw dimension_error(
            "fuse_and_classify: head expects text dim " + std::to_string(head.dim_hidden) +
            " + graph dim " + std::to_string(head.dim_graph) + " (input size " +
            std::to_string(head.dim_hidden + head.dim_graph) + "), got " +
            std::to_string(pooled.size()) + " and " + std::to_string(knowledge.size()));
    return add(vecmat(concat(pooled, knowledge), head.weight), head.bias);
}

// Response loss: softmax cross entropy of the class logits against the label.
inline Tensor rl_loss(const Tensor& logits, int label) {
    if (logits.rank() != 1)
        throw dimension_error("rl_loss: expected rank-1 logits, got " +
                              detail::shape_str(logits.shape()));
    return softmax_cross_entropy(reshape(logits, {1, logits.size()}), std::vector<int>{label});
}

} // namespace rdr
