#pragma once

// End-to-end assembly: run configuration, the three-loss forward pass and its
// single-objective baseline, the deterministic minibatch trainer, evaluation,
// the synthetic knowledge-dependent task generator, and the two-seed A/B
// comparison harness.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/graph_embed.hpp"
#include "rdr/kg.hpp"
#include "rdr/nlu.hpp"
#include "rdr/rng.hpp"
#include "rdr/subgraph.hpp"
#include "rdr/tensor.hpp"

namespace rdr {

// ---------------------------------------------------------------------------
// Task data

struct TaskExample {
    std::string text; // sentence pairs pre-joined as "premise [SEP] hypothesis"
    int label = 0;
    std::string relation; // generating relation, synthetic tasks only
};

inline std::vector<TaskExample> load_dataset(std::istream& in) {
    std::vector<TaskExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw parse_error("dataset line " + std::to_string(lineno) +
                              ": expected `label<TAB>text`");
        TaskExample ex;
        try {
            ex.label = static_cast<int>(parse_int(std::string_view(line).substr(0, tab)));
        } catch (const parse_error&) {
            throw parse_error("dataset line " + std::to_string(lineno) + ": bad label");
        }
        ex.text = line.substr(tab + 1);
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<TaskExample> load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw argument_error("load_dataset: cannot open '" + path + "'");
    return load_dataset(f);
}

inline void save_dataset(const std::vector<TaskExample>& dataset, std::ostream& out) {
    for (const TaskExample& ex : dataset) out << ex.label << '\t' << ex.text << '\n';
}

inline void save_dataset(const std::vector<TaskExample>& dataset, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw argument_error("save_dataset: cannot open '" + path + "'");
    save_dataset(dataset, f);
}

inline int class_count(const std::vector<TaskExample>& dataset) {
    int mx = -1;
    for (const TaskExample& ex : dataset) {
        if (ex.label < 0) throw argument_error("dataset: negative label");
        mx = std::max(mx, ex.label);
    }
    return std::max(mx + 1, 2);
}

// ---------------------------------------------------------------------------
// Run configuration

enum class RunMode { rdr, baseline };

struct RunConfig {
    RunMode mode = RunMode::rdr;
    int batch_size = 8;
    int epochs = 1;
    double learning_rate = 0.5;
    double kg_fraction = 0.10;
    std::uint64_t kg_seed = 1;
    std::uint64_t model_seed = 1;
    int dim_embed = 16;
    int dim_hidden = 16;
    int dim_graph = 16;
    int hop_threshold = 2;
    int max_span = 3;
    LinkPredConfig link;
    double w_pl = 1.0;
    double w_gel = 1.0;
    double w_rl = 1.0;
    double eval_fraction = 0.25; // held-out tail used by compare_runs
    bool eval_full_kg = false;   // evaluate against the full KG instead of the run's sample

    void validate() const {
        if (batch_size < 1) throw argument_error("config: batch_size must be >= 1");
        if (epochs < 0) throw argument_error("config: epochs must be >= 0");
        if (!(learning_rate >= 0.0)) throw argument_error("config: learning_rate must be >= 0");
        if (!(kg_fraction > 0.0) || kg_fraction > 1.0)
            throw argument_error("config: kg_fraction must be in (0,1]");
        if (dim_embed < 1 || dim_hidden < 1 || dim_graph < 1)
            throw argument_error("config: dimensions must be >= 1");
        if (hop_threshold < 0) throw argument_error("config: hop_threshold must be >= 0");
        if (max_span < 1) throw argument_error("config: max_span must be >= 1");
        if (w_pl < 0.0 || w_gel < 0.0 || w_rl < 0.0)
            throw argument_error("config: loss weights must be >= 0");
        if (!(eval_fraction >= 0.0) || eval_fraction >= 1.0)
            throw argument_error("config: eval_fraction must be in [0,1)");
        link.validate();
    }

    // The optimized combination: baseline mode is the (0,0,1) degenerate case
    // of the same computation graph.
    double opt_w_pl() const { return mode == RunMode::baseline ? 0.0 : w_pl; }
    double opt_w_gel() const { return mode == RunMode::baseline ? 0.0 : w_gel; }
    double opt_w_rl() const { return mode == RunMode::baseline ? 1.0 : w_rl; }
};

inline std::string mode_name(RunMode m) { return m == RunMode::rdr ? "rdr" : "baseline"; }

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&](const std::string& v) {
        try {
            return static_cast<int>(parse_int(v));
        } catch (const parse_error&) {
            throw parse_error("config: bad integer for '" + key + "': " + v);
        }
    };
    auto as_u64 = [&](const std::string& v) {
        try {
            return static_cast<std::uint64_t>(parse_int(v));
        } catch (const parse_error&) {
            throw parse_error("config: bad integer for '" + key + "': " + v);
        }
    };
    auto as_double = [&](const std::string& v) { return parse_double(v); };

    if (key == "mode") {
        if (value == "rdr")
            cfg.mode = RunMode::rdr;
        else if (value == "baseline")
            cfg.mode = RunMode::baseline;
        else
            throw parse_error("config: mode must be rdr or baseline, got '" + value + "'");
    } else if (key == "batch_size")
        cfg.batch_size = as_int(value);
    else if (key == "epochs")
        cfg.epochs = as_int(value);
    else if (key == "learning_rate")
        cfg.learning_rate = as_double(value);
    else if (key == "kg_fraction")
        cfg.kg_fraction = as_double(value);
    else if (key == "kg_seed")
        cfg.kg_seed = as_u64(value);
    else if (key == "model_seed")
        cfg.model_seed = as_u64(value);
    else if (key == "dim_embed")
        cfg.dim_embed = as_int(value);
    else if (key == "dim_hidden")
        cfg.dim_hidden = as_int(value);
    else if (key == "dim_graph")
        cfg.dim_graph = as_int(value);
    else if (key == "hop_threshold")
        cfg.hop_threshold = as_int(value);
    else if (key == "max_span")
        cfg.max_span = as_int(value);
    else if (key == "tau") {
        if (value == "auto")
            cfg.link.tau.reset();
        else
            cfg.link.tau = as_double(value);
    } else if (key == "margin")
        cfg.link.margin = as_double(value);
    else if (key == "negatives_per_positive")
        cfg.link.negatives_per_positive = as_int(value);
    else if (key == "hits_k") {
        cfg.link.hits_k.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) cfg.link.hits_k.push_back(as_int(item));
    } else if (key == "w_pl")
        cfg.w_pl = as_double(value);
    else if (key == "w_gel")
        cfg.w_gel = as_double(value);
    else if (key == "w_rl")
        cfg.w_rl = as_double(value);
    else if (key == "eval_fraction")
        cfg.eval_fraction = as_double(value);
    else if (key == "eval_full_kg")
        cfg.eval_full_kg = (value == "1" || value == "true");
    else
        throw parse_error("config: unknown key '" + key + "'");
}

// `key = value` lines, '#' comments.
inline RunConfig load_config(std::istream& in, RunConfig base = {}) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string stripped;
        for (char c : line) {
            if (c == '#') break;
            stripped += c;
        }
        auto eq = stripped.find('=');
        auto trim = [](std::string s) {
            std::size_t b = s.find_first_not_of(" \t");
            std::size_t e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        if (eq == std::string::npos) {
            if (!trim(stripped).empty())
                throw parse_error("config line " + std::to_string(lineno) +
                                  ": expected `key = value`");
            continue;
        }
        apply_config_entry(base, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw argument_error("load_config: cannot open '" + path + "'");
    return load_config(f, base);
}

inline std::string config_to_kv(const RunConfig& cfg) {
    std::string out;
    out += "mode = " + mode_name(cfg.mode) + "\n";
    out += "batch_size = " + std::to_string(cfg.batch_size) + "\n";
    out += "epochs = " + std::to_string(cfg.epochs) + "\n";
    out += "learning_rate = " + format_double(cfg.learning_rate) + "\n";
    out += "kg_fraction = " + format_double(cfg.kg_fraction) + "\n";
    out += "kg_seed = " + std::to_string(cfg.kg_seed) + "\n";
    out += "model_seed = " + std::to_string(cfg.model_seed) + "\n";
    out += "dim_embed = " + std::to_string(cfg.dim_embed) + "\n";
    out += "dim_hidden = " + std::to_string(cfg.dim_hidden) + "\n";
    out += "dim_graph = " + std::to_string(cfg.dim_graph) + "\n";
    out += "hop_threshold = " + std::to_string(cfg.hop_threshold) + "\n";
    out += "max_span = " + std::to_string(cfg.max_span) + "\n";
    out += "tau = " + (cfg.link.tau ? format_double(*cfg.link.tau) : std::string("auto")) + "\n";
    out += "margin = " + format_double(cfg.link.margin) + "\n";
    out += "negatives_per_positive = " + std::to_string(cfg.link.negatives_per_positive) + "\n";
    out += "hits_k =";
    for (std::size_t i = 0; i < cfg.link.hits_k.size(); ++i)
        out += (i ? "," : " ") + std::to_string(cfg.link.hits_k[i]);
    out += "\n";
    out += "w_pl = " + format_double(cfg.w_pl) + "\n";
    out += "w_gel = " + format_double(cfg.w_gel) + "\n";
    out += "w_rl = " + format_double(cfg.w_rl) + "\n";
    out += "eval_fraction = " + format_double(cfg.eval_fraction) + "\n";
    out += "eval_full_kg = " + std::string(cfg.eval_full_kg ? "true" : "false") + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary over the task dataset

struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;

    int add(const std::string& tok) {
        auto it = ids.find(tok);
        if (it != ids.end()) return it->second;
        int id = static_cast<int>(tokens.size());
        ids.emplace(tok, id);
        tokens.push_back(tok);
        return id;
    }

    int id(const std::string& tok) const {
        auto it = ids.find(tok);
        return it == ids.end() ? -1 : it->second;
    }

    std::size_t size() const { return tokens.size(); }
};

inline Vocabulary build_vocabulary(const std::vector<TaskExample>& dataset) {
    Vocabulary v;
    for (const TaskExample& ex : dataset)
        for (const std::string& tok : tokenize(ex.text).tokens) v.add(tok);
    return v;
}

inline std::vector<int> token_ids(const Vocabulary& vocab, const TokenizedText& text) {
    std::vector<int> ids;
    ids.reserve(text.tokens.size());
    for (const std::string& tok : text.tokens) {
        int id = vocab.id(tok);
        if (id < 0)
            throw vocabulary_error("token '" + tok + "' missing from the task vocabulary");
        ids.push_back(id);
    }
    return ids;
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw argument_error("save_vocabulary: cannot open '" + path + "'");
    for (const std::string& t : v.tokens) f << t << '\n';
}

inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw argument_error("load_vocabulary: cannot open '" + path + "'");
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) v.add(line);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Models

struct PipelineModels {
    Vocabulary vocab;
    RecapModel recap;
    GraphEmbeddingModel graph;
    FusionHead head;
    ParamRegistry registry;
    int classes = 2;
};

inline PipelineModels init_models(const Vocabulary& vocab, const KnowledgeGraph& kg_sample,
                                  int classes, const RunConfig& cfg) {
    if (vocab.size() == 0) throw argument_error("init_models: empty vocabulary");
    PipelineModels m;
    m.vocab = vocab;
    m.classes = classes;
    Rng rng(mix_seed(cfg.model_seed, 0x494E4954ull)); // "INIT"
    m.recap = RecapModel::init(m.registry, "recap", static_cast<int>(vocab.size()),
                               cfg.dim_embed, cfg.dim_hidden, rng);
    m.graph = GraphEmbeddingModel::init(m.registry, "graph",
                                        std::max<std::size_t>(kg_sample.node_count(), 1),
                                        std::max<std::size_t>(kg_sample.relation_count(), 1),
                                        cfg.dim_graph, rng);
    m.head = FusionHead::init(m.registry, "head", cfg.dim_hidden, cfg.dim_graph, classes, rng);
    return m;
}

// ---------------------------------------------------------------------------
// Forward passes

struct ForwardResult {
    Tensor z;     // class logits
    Tensor pl;    // paraphrasing loss
    Tensor gel;   // graph embedding loss (0 for empty/edge-free subgraphs)
    Tensor rl;    // response loss
    Tensor total; // optimized combination
    Subgraph sub;
};

inline Tensor combine_losses(const Tensor& pl, const Tensor& gel, const Tensor& rl,
                             double w_pl, double w_gel, double w_rl) {
    return add(add(scale(pl, w_pl), scale(gel, w_gel)), scale(rl, w_rl));
}

namespace detail {

struct ExampleLosses {
    Tensor z;
    Tensor pl;
    Tensor gel;
    Tensor rl;
    Subgraph sub;
};

inline ExampleLosses forward_example(const TaskExample& example, PipelineModels& models,
                                     const KnowledgeGraph& kg_sample, const RunConfig& cfg,
                                     std::uint64_t corruption_seed) {
    ExampleLosses out;
    TokenizedText toks = tokenize(example.text);
    std::vector<int> ids = token_ids(models.vocab, toks);
    RecapOut recap = recap_forward(models.recap, ids);
    out.pl = pl_loss(recap.logits, ids);

    out.sub = pipeline_extract(example.text, kg_sample, {cfg.max_span, cfg.hop_threshold});
    Tensor knowledge = aggregate(models.graph, out.sub);
    if (!out.sub.triples.empty() && out.sub.nodes.size() >= 2) {
        Rng rng(corruption_seed);
        out.gel = gel_loss(models.graph, out.sub, cfg.link, rng);
    } else {
        out.gel = Tensor::scalar_const(0.0);
    }

    out.z = fuse_and_classify(models.head, recap.pooled, knowledge);
    out.rl = rl_loss(out.z, example.label);
    return out;
}

} // namespace detail

// Full three-objective forward pass; total = w_pl*PL + w_gel*GEL + w_rl*RL in
// that fixed summation order.
inline ForwardResult forward_rdr(const TaskExample& example, PipelineModels& models,
                                 const KnowledgeGraph& kg_sample, const RunConfig& cfg,
                                 std::uint64_t corruption_seed) {
    auto fl = detail::forward_example(example, models, kg_sample, cfg, corruption_seed);
    ForwardResult out;
    out.z = fl.z;
    out.pl = fl.pl;
    out.gel = fl.gel;
    out.rl = fl.rl;
    out.sub = std::move(fl.sub);
    out.total = combine_losses(out.pl, out.gel, out.rl, cfg.w_pl, cfg.w_gel, cfg.w_rl);
    return out;
}

// Same computation graph with the (0,0,1) objective: PL and GEL are computed
// for logging but carry zero weight in the optimized loss.
inline ForwardResult forward_baseline(const TaskExample& example, PipelineModels& models,
                                      const KnowledgeGraph& kg_sample, const RunConfig& cfg,
                                      std::uint64_t corruption_seed) {
    auto fl = detail::forward_example(example, models, kg_sample, cfg, corruption_seed);
    ForwardResult out;
    out.z = fl.z;
    out.pl = fl.pl;
    out.gel = fl.gel;
    out.rl = fl.rl;
    out.sub = std::move(fl.sub);
    out.total = combine_losses(out.pl, out.gel, out.rl, 0.0, 0.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Loss reporting

struct BatchRow {
    int epoch = 0;
    int batch = 0;
    int size = 0;
    double pl = 0.0, gel = 0.0, rl = 0.0, total = 0.0;
};

struct EpochRow {
    int epoch = 0;
    double pl = 0.0, gel = 0.0, rl = 0.0, total = 0.0;
    double accuracy = 0.0;
    double mrr = 0.0;
    std::vector<std::pair<int, double>> hits_at_k;
    std::size_t metric_examples = 0; // examples with a rankable subgraph
};

struct LossReport {
    std::vector<BatchRow> batches;
    std::vector<EpochRow> epochs;
    std::uint64_t kg_seed = 0;
    std::uint64_t model_seed = 0;

    std::string csv() const {
        std::string out = "epoch,PL,GEL,RL,L,accuracy\n";
        for (const EpochRow& e : epochs) {
            out += std::to_string(e.epoch) + "," + format_double(e.pl) + "," +
                   format_double(e.gel) + "," + format_double(e.rl) + "," +
                   format_double(e.total) + "," + format_double(e.accuracy) + "\n";
        }
        return out;
    }

    std::string summary_kv() const {
        std::string out;
        out += "kg_seed = " + std::to_string(kg_seed) + "\n";
        out += "model_seed = " + std::to_string(model_seed) + "\n";
        out += "epochs = " + std::to_string(epochs.size()) + "\n";
        if (!epochs.empty()) {
            const EpochRow& e = epochs.back();
            out += "final_PL = " + format_double(e.pl) + "\n";
            out += "final_GEL = " + format_double(e.gel) + "\n";
            out += "final_RL = " + format_double(e.rl) + "\n";
            out += "final_L = " + format_double(e.total) + "\n";
            out += "final_accuracy = " + format_double(e.accuracy) + "\n";
            out += "final_MRR = " + format_double(e.mrr) + "\n";
            for (const auto& [k, v] : e.hits_at_k)
                out += "final_hits@" + std::to_string(k) + " = " + format_double(v) + "\n";
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::array<int, 2>> per_class; // [correct, total] per label
    std::size_t examples = 0;

    std::string to_kv() const {
        std::string out = "examples = " + std::to_string(examples) + "\n";
        out += "accuracy = " + format_double(accuracy) + "\n";
        for (std::size_t c = 0; c < per_class.size(); ++c)
            out += "class_" + std::to_string(c) + " = " + std::to_string(per_class[c][0]) +
                   "/" + std::to_string(per_class[c][1]) + "\n";
        return out;
    }
};

namespace detail {

// Maps a subgraph extracted over one graph onto another graph's node ids by
// surface string; nodes absent from the target are dropped.
inline Subgraph remap_subgraph(const Subgraph& sub, const KnowledgeGraph& from,
                               const KnowledgeGraph& to) {
    Subgraph out;
    out.hop_threshold = sub.hop_threshold;
    out.unresolved_seeds = sub.unresolved_seeds;
    std::unordered_map<int, int> id_map;
    for (int n : sub.nodes) {
        int t = to.node_id(from.node_name(n));
        if (t >= 0) {
            id_map.emplace(n, t);
            out.nodes.push_back(t);
        }
    }
    std::sort(out.nodes.begin(), out.nodes.end());
    for (int s : sub.seed_entities) {
        auto it = id_map.find(s);
        if (it != id_map.end()) out.seed_entities.push_back(it->second);
    }
    std::sort(out.seed_entities.begin(), out.seed_entities.end());
    for (const Triple& t : sub.triples) {
        auto h = id_map.find(t.head);
        auto tl = id_map.find(t.tail);
        if (h == id_map.end() || tl == id_map.end()) continue;
        int r = to.relation_id(from.relation_name(t.rel));
        if (r < 0) continue;
        out.triples.push_back({h->second, r, tl->second});
    }
    return out;
}

} // namespace detail

// Accuracy of argmax(z) against the labels; ties resolve to the lowest class
// index. When full_kg is supplied, extraction runs over it and the result is
// remapped onto the run's sampled graph before aggregation.
inline EvalResult evaluate(PipelineModels& models, const std::vector<TaskExample>& dataset,
                           const KnowledgeGraph& kg_sample, const RunConfig& cfg,
                           const KnowledgeGraph* full_kg = nullptr) {
    if (dataset.empty()) throw argument_error("evaluate: empty dataset");
    EvalResult res;
    res.per_class.assign(static_cast<std::size_t>(models.classes), {0, 0});
    std::size_t correct = 0;
    for (const TaskExample& ex : dataset) {
        TokenizedText toks = tokenize(ex.text);
        std::vector<int> ids = token_ids(models.vocab, toks);
        RecapOut recap = recap_forward(models.recap, ids);
        Subgraph sub;
        if (full_kg) {
            Subgraph raw = pipeline_extract(ex.text, *full_kg, {cfg.max_span, cfg.hop_threshold});
            sub = detail::remap_subgraph(raw, *full_kg, kg_sample);
        } else {
            sub = pipeline_extract(ex.text, kg_sample, {cfg.max_span, cfg.hop_threshold});
        }
        Tensor knowledge = aggregate(models.graph, sub);
        Tensor z = fuse_and_classify(models.head, recap.pooled, knowledge);
        std::size_t best = 0;
        for (std::size_t c = 1; c < z.size(); ++c)
            if (z.at(c) > z.at(best)) best = c;
        if (ex.label >= models.classes)
            throw argument_error("evaluate: label " + std::to_string(ex.label) +
                                 " outside model's " + std::to_string(models.classes) +
                                 " classes");
        auto& pc = res.per_class[static_cast<std::size_t>(ex.label)];
        ++pc[1];
        if (static_cast<int>(best) == ex.label) {
            ++pc[0];
            ++correct;
        }
    }
    res.examples = dataset.size();
    res.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
    return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    PipelineModels models;
    KnowledgeGraph kg_sample;
    LossReport report;
};

// Deterministic given (dataset, kg, config): the KG sample, initialization,
// shuffling, and corruption draws are all derived from the config seeds, and
// every floating-point reduction has a fixed order.
inline TrainResult train(const std::vector<TaskExample>& dataset, const KnowledgeGraph& kg,
                         const RunConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw argument_error("train: empty dataset");

    TrainResult result;
    result.kg_sample = sample_fraction(kg, cfg.kg_fraction, cfg.kg_seed);
    Vocabulary vocab = build_vocabulary(dataset);
    result.models = init_models(vocab, result.kg_sample, class_count(dataset), cfg);
    result.report.kg_seed = cfg.kg_seed;
    result.report.model_seed = cfg.model_seed;

    PipelineModels& models = result.models;
    const double w_pl = cfg.opt_w_pl(), w_gel = cfg.opt_w_gel(), w_rl = cfg.opt_w_rl();
    const std::size_t n = dataset.size();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(cfg.model_seed, 0x53485546ull, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epl = 0.0, egel = 0.0, erl = 0.0, etot = 0.0;
        int batch_index = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Tensor> pls, gels, rls;
            for (std::size_t pos = start; pos < stop; ++pos) {
                const std::size_t idx = order[pos];
                auto fl = detail::forward_example(
                    dataset[idx], models, result.kg_sample, cfg,
                    mix_seed(cfg.model_seed, static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(idx)));
                pls.push_back(fl.pl);
                gels.push_back(fl.gel);
                rls.push_back(fl.rl);
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            Tensor pl = scale(sum_scalars(pls), inv);
            Tensor gel = scale(sum_scalars(gels), inv);
            Tensor rl = scale(sum_scalars(rls), inv);
            Tensor total = combine_losses(pl, gel, rl, w_pl, w_gel, w_rl);

            for (const auto& [name, t] :
                 {std::pair<const char*, const Tensor*>{"PL", &pl}, {"GEL", &gel},
                  {"RL", &rl}, {"L", &total}})
                if (!std::isfinite(t->scalar()))
                    throw numeric_error("train: non-finite " + std::string(name) +
                                        " at epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(batch_index));

            backward(total);
            sgd_step(models.registry, cfg.learning_rate);

            BatchRow row;
            row.epoch = epoch;
            row.batch = batch_index;
            row.size = static_cast<int>(stop - start);
            row.pl = pl.scalar();
            row.gel = gel.scalar();
            row.rl = rl.scalar();
            row.total = total.scalar();
            result.report.batches.push_back(row);

            const double w = static_cast<double>(row.size) / static_cast<double>(n);
            epl += w * row.pl;
            egel += w * row.gel;
            erl += w * row.rl;
            etot += w * row.total;
            ++batch_index;
        }

        EpochRow erow;
        erow.epoch = epoch;
        erow.pl = epl;
        erow.gel = egel;
        erow.rl = erl;
        erow.total = etot;
        erow.accuracy = evaluate(models, dataset, result.kg_sample, cfg).accuracy;

        // link-prediction metrics on the frozen embeddings
        double mrr_sum = 0.0;
        std::vector<int> ks(cfg.link.hits_k);
        std::sort(ks.begin(), ks.end());
        ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
        std::vector<double> hit_sums(ks.size(), 0.0);
        std::size_t counted = 0;
        for (const TaskExample& ex : dataset) {
            Subgraph sub =
                pipeline_extract(ex.text, result.kg_sample, {cfg.max_span, cfg.hop_threshold});
            if (sub.triples.empty() || sub.nodes.size() < 2) continue;
            LinkMetrics lm = link_metrics(models.graph, sub, cfg.link);
            mrr_sum += lm.mrr;
            for (std::size_t i = 0; i < ks.size(); ++i) hit_sums[i] += lm.hits_at_k[i].second;
            ++counted;
        }
        erow.metric_examples = counted;
        if (counted > 0) {
            erow.mrr = mrr_sum / static_cast<double>(counted);
            for (std::size_t i = 0; i < ks.size(); ++i)
                erow.hits_at_k.emplace_back(ks[i], hit_sums[i] / static_cast<double>(counted));
        } else {
            for (int k : ks) erow.hits_at_k.emplace_back(k, 0.0);
        }
        result.report.epochs.push_back(std::move(erow));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Full-pipeline gradient check

// Runs grad_check over every parameter of the full three-loss objective on a
// small batch drawn from the dataset (vocabulary and models are built over
// the whole dataset, as in training). Corruption draws are frozen per
// example, and the ranking margin is nudged away from any hinge kink so the
// central differences stay on one smooth branch.
inline GradCheckReport pipeline_grad_check(const std::vector<TaskExample>& dataset,
                                           std::size_t batch_count,
                                           const KnowledgeGraph& kg, RunConfig cfg,
                                           double epsilon = 1e-5) {
    cfg.validate();
    if (batch_count < 1 || batch_count > dataset.size())
        throw argument_error("pipeline_grad_check: batch must be in [1, dataset size]");
    const std::vector<TaskExample> batch(dataset.begin(),
                                         dataset.begin() + static_cast<long>(batch_count));

    KnowledgeGraph sample = sample_fraction(kg, cfg.kg_fraction, cfg.kg_seed);
    Vocabulary vocab = build_vocabulary(dataset);
    PipelineModels models = init_models(vocab, sample, class_count(dataset), cfg);

    auto corruption_seed = [&](std::size_t idx) {
        return mix_seed(cfg.model_seed, 0ull, static_cast<std::uint64_t>(idx));
    };

    for (int tries = 0; tries < 200; ++tries) {
        bool clear = true;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Subgraph sub =
                pipeline_extract(batch[i].text, sample, {cfg.max_span, cfg.hop_threshold});
            if (sub.triples.empty() || sub.nodes.size() < 2) continue;
            Rng rng(corruption_seed(i));
            for (const Corruption& c :
                 sample_corruptions(sub, cfg.link.negatives_per_positive, rng)) {
                const double pre = cfg.link.margin + transe_score_value(models.graph, c.original) -
                                   transe_score_value(models.graph, c.corrupted);
                if (std::fabs(pre) < 1e-3) clear = false;
            }
        }
        if (clear) break;
        cfg.link.margin += 1.7e-3;
    }

    auto fn = [&](ParamRegistry&) {
        std::vector<Tensor> pls, gels, rls;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            auto fl = detail::forward_example(batch[i], models, sample, cfg, corruption_seed(i));
            pls.push_back(fl.pl);
            gels.push_back(fl.gel);
            rls.push_back(fl.rl);
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        return combine_losses(scale(sum_scalars(pls), inv), scale(sum_scalars(gels), inv),
                              scale(sum_scalars(rls), inv), cfg.w_pl, cfg.w_gel, cfg.w_rl);
    };
    return grad_check(fn, models.registry, epsilon);
}

// ---------------------------------------------------------------------------
// Synthetic knowledge-dependent task
//
// Entities split into synonym clusters (a star of Synonym/IsA edges around a
// cluster head) plus a set of shared anchor concepts every head IsA-links to.
// Examples pair cluster members: same cluster = entailment, different
// clusters = not. Member names are random strings, so the label is carried by
// the KG alone; the shared anchors make the two cases separable through the
// mean-aggregated subgraph embedding.

struct SyntheticTask {
    std::vector<TaskExample> examples;
    KnowledgeGraph kg;
};

namespace detail {

inline std::string random_name(Rng& rng, std::set<std::string>& used) {
    for (;;) {
        std::string s;
        for (int i = 0; i < 6; ++i)
            s += static_cast<char>('a' + static_cast<char>(rng.below(26)));
        if (used.insert(s).second) return s;
    }
}

} // namespace detail

inline SyntheticTask generate_synthetic_task(int n_entities, int n_examples,
                                             std::uint64_t seed) {
    if (n_entities < 8) throw argument_error("generate_synthetic_task: need >= 8 entities");
    if (n_examples < 16) throw argument_error("generate_synthetic_task: need >= 16 examples");

    Rng rng(mix_seed(seed, 0x53594E54ull)); // "SYNT"
    std::set<std::string> used;

    const int anchors = std::max(1, n_entities / 6);
    const int rest = n_entities - anchors;
    int clusters = std::max(2, rest / 10);
    clusters = std::min(clusters, rest / 3); // head + at least 2 members each
    const int member_total = rest - clusters;

    std::vector<std::string> anchor_names, head_names;
    std::vector<std::vector<std::string>> members(static_cast<std::size_t>(clusters));
    for (int i = 0; i < anchors; ++i) anchor_names.push_back(detail::random_name(rng, used));
    for (int i = 0; i < clusters; ++i) head_names.push_back(detail::random_name(rng, used));
    for (int i = 0; i < member_total; ++i)
        members[static_cast<std::size_t>(i % clusters)].push_back(
            detail::random_name(rng, used));

    SyntheticTask task;
    for (int c = 0; c < clusters; ++c) {
        const auto& ms = members[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < ms.size(); ++i) {
            // one IsA edge per cluster for relation variety; the rest Synonym
            const std::string& rel = (i == 0) ? "IsA" : "Synonym";
            task.kg.add_triple(ms[i], rel, head_names[static_cast<std::size_t>(c)]);
        }
        for (const std::string& a : anchor_names)
            task.kg.add_triple(head_names[static_cast<std::size_t>(c)], "IsA", a);
    }
    // distractor relations between heads; they never qualify for the label
    task.kg.add_triple(head_names[0], "Antonym", head_names[1]);
    task.kg.add_triple(head_names[0], "RelatedTo", head_names[1]);
    for (int a = 0; a < clusters; ++a)
        for (int b = a + 1; b < clusters; ++b) {
            if (a == 0 && b == 1) continue;
            const std::uint64_t draw = rng.below(10);
            if (draw < 2)
                task.kg.add_triple(head_names[static_cast<std::size_t>(a)], "Antonym",
                                   head_names[static_cast<std::size_t>(b)]);
            else if (draw < 4)
                task.kg.add_triple(head_names[static_cast<std::size_t>(a)], "RelatedTo",
                                   head_names[static_cast<std::size_t>(b)]);
        }

    // ordered pair pools; members only, so every emitted pair's label follows
    // the 2-hop Synonym/IsA rule by construction
    std::vector<std::pair<std::string, std::string>> pos_pool, neg_pool;
    std::vector<std::string> pos_rel;
    for (int c = 0; c < clusters; ++c) {
        const auto& ms = members[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < ms.size(); ++i)
            for (std::size_t j = 0; j < ms.size(); ++j)
                if (i != j) {
                    pos_pool.emplace_back(ms[i], ms[j]);
                    pos_rel.push_back(i == 0 ? "IsA" : "Synonym");
                }
    }
    for (int a = 0; a < clusters; ++a)
        for (int b = 0; b < clusters; ++b) {
            if (a == b) continue;
            for (const std::string& x : members[static_cast<std::size_t>(a)])
                for (const std::string& y : members[static_cast<std::size_t>(b)])
                    neg_pool.emplace_back(x, y);
        }

    std::vector<std::size_t> pos_order(pos_pool.size()), neg_order(neg_pool.size());
    for (std::size_t i = 0; i < pos_order.size(); ++i) pos_order[i] = i;
    for (std::size_t i = 0; i < neg_order.size(); ++i) neg_order[i] = i;
    rng.shuffle(pos_order);
    rng.shuffle(neg_order);

    const int n_pos = (n_examples + 1) / 2;
    for (int i = 0; i < n_examples; ++i) {
        TaskExample ex;
        if (i % 2 == 0 && i / 2 < n_pos) {
            const std::size_t k = pos_order[static_cast<std::size_t>(i / 2) % pos_order.size()];
            ex.text = pos_pool[k].first + " [SEP] " + pos_pool[k].second;
            ex.label = 1;
            ex.relation = pos_rel[k];
        } else {
            const std::size_t k = neg_order[static_cast<std::size_t>(i / 2) % neg_order.size()];
            ex.text = neg_pool[k].first + " [SEP] " + neg_pool[k].second;
            ex.label = 0;
        }
        task.examples.push_back(std::move(ex));
    }
    return task;
}

// ---------------------------------------------------------------------------
// Two-seed A/B comparison

struct Comparison {
    struct Entry {
        std::uint64_t seed = 0;
        double acc_a = 0.0;
        double acc_b = 0.0;
    };
    std::vector<Entry> per_seed;
    double mean_a = 0.0;
    double mean_b = 0.0;
    double difference = 0.0; // mean_a - mean_b

    std::string to_kv() const {
        std::string out;
        for (const Entry& e : per_seed) {
            out += "seed_" + std::to_string(e.seed) + "_a = " + format_double(e.acc_a) + "\n";
            out += "seed_" + std::to_string(e.seed) + "_b = " + format_double(e.acc_b) + "\n";
        }
        out += "mean_a = " + format_double(mean_a) + "\n";
        out += "mean_b = " + format_double(mean_b) + "\n";
        out += "difference = " + format_double(difference) + "\n";
        return out;
    }
};

namespace detail {

inline std::pair<std::vector<TaskExample>, std::vector<TaskExample>> split_dataset(
    const std::vector<TaskExample>& dataset, double eval_fraction) {
    const std::size_t n = dataset.size();
    const std::size_t n_eval = static_cast<std::size_t>(
        std::llround(eval_fraction * static_cast<double>(n)));
    if (n_eval == 0 || n_eval >= n)
        return {dataset, dataset}; // no held-out slice; evaluate on the training set
    std::vector<TaskExample> train_set(dataset.begin(), dataset.end() - static_cast<long>(n_eval));
    std::vector<TaskExample> eval_set(dataset.end() - static_cast<long>(n_eval), dataset.end());
    return {std::move(train_set), std::move(eval_set)};
}

inline double run_and_score(const std::vector<TaskExample>& train_set,
                            const std::vector<TaskExample>& eval_set,
                            const KnowledgeGraph& kg, RunConfig cfg, std::uint64_t seed) {
    cfg.model_seed = seed;
    cfg.kg_seed = seed;
    TrainResult tr = train(train_set, kg, cfg);
    // hand-made datasets can put a token only in the eval slice; fail loudly
    // instead of feeding the recap model an id it has no row for
    for (const TaskExample& ex : eval_set)
        for (const std::string& tok : tokenize(ex.text).tokens)
            if (tr.models.vocab.id(tok) < 0)
                throw vocabulary_error("compare_runs: eval token '" + tok +
                                       "' missing from training vocabulary");
    return evaluate(tr.models, eval_set, tr.kg_sample, cfg,
                    cfg.eval_full_kg ? &kg : nullptr)
        .accuracy;
}

} // namespace detail

// Trains and evaluates both configurations under each seed (the same seed
// drives the KG sample and the initialization of both sides) and reports
// per-seed and mean accuracies. The dataset tail of eval_fraction is held out
// for evaluation.
inline Comparison compare_runs(const std::vector<TaskExample>& dataset,
                               const KnowledgeGraph& kg, const RunConfig& cfg_a,
                               const RunConfig& cfg_b,
                               const std::array<std::uint64_t, 2>& seeds) {
    if (cfg_a.eval_fraction != cfg_b.eval_fraction)
        throw argument_error("compare_runs: configs disagree on eval_fraction");
    auto [train_set, eval_set] = detail::split_dataset(dataset, cfg_a.eval_fraction);

    Comparison cmp;
    double sum_a = 0.0, sum_b = 0.0;
    for (std::uint64_t seed : seeds) {
        Comparison::Entry e;
        e.seed = seed;
        e.acc_a = detail::run_and_score(train_set, eval_set, kg, cfg_a, seed);
        e.acc_b = detail::run_and_score(train_set, eval_set, kg, cfg_b, seed);
        sum_a += e.acc_a;
        sum_b += e.acc_b;
        cmp.per_seed.push_back(e);
    }
    cmp.mean_a = sum_a / static_cast<double>(seeds.size());
    cmp.mean_b = sum_b / static_cast<double>(seeds.size());
    cmp.difference = cmp.mean_a - cmp.mean_b;
    return cmp;
}

} // namespace rdr
