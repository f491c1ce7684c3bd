#include <catch2/catch.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "rdr/pipeline.hpp"

using namespace rdr;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.learning_rate = 0.2;
    cfg.kg_fraction = 1.0;
    cfg.dim_embed = 6;
    cfg.dim_hidden = 6;
    cfg.dim_graph = 6;
    return cfg;
}

} // namespace

TEST_CASE("synthetic task labels match a 2-hop reachability oracle") {
    for (std::uint64_t seed : {3ull, 9ull}) {
        SyntheticTask task = generate_synthetic_task(40, 400, seed);
        REQUIRE(task.examples.size() == 400);

        // qualifying edges: Synonym and IsA only
        std::vector<std::pair<std::string, std::string>> edges;
        for (const Triple& t : task.kg.triples()) {
            const std::string& rel = task.kg.relation_name(t.rel);
            if (rel == "Synonym" || rel == "IsA")
                edges.emplace_back(task.kg.node_name(t.head), task.kg.node_name(t.tail));
        }
        int pos = 0;
        for (const TaskExample& ex : task.examples) {
            auto toks = tokenize(ex.text).tokens;
            REQUIRE(toks.size() == 3); // "a sep b"
            const bool linked = oracle::reachable_within(edges, toks[0], toks[2], 2);
            REQUIRE(ex.label == (linked ? 1 : 0));
            pos += ex.label;
        }
        REQUIRE(pos == 200); // balanced classes

        // relation variety requirement
        std::set<std::string> rels;
        for (const Triple& t : task.kg.triples()) rels.insert(task.kg.relation_name(t.rel));
        for (const char* need : {"Synonym", "IsA", "Antonym", "RelatedTo"})
            REQUIRE(rels.count(need) == 1);
        REQUIRE(static_cast<int>(task.kg.node_count()) == 40);
    }
}

TEST_CASE("synthetic task at this scale never repeats a pair") {
    SyntheticTask task = generate_synthetic_task(40, 400, 5);
    std::set<std::string> texts;
    for (const TaskExample& ex : task.examples) texts.insert(ex.text);
    REQUIRE(texts.size() == task.examples.size());
}

TEST_CASE("synthetic task validates its arguments") {
    REQUIRE_THROWS_AS(generate_synthetic_task(7, 100, 1), argument_error);
    REQUIRE_THROWS_AS(generate_synthetic_task(20, 15, 1), argument_error);
}

TEST_CASE("synthetic generation is deterministic") {
    SyntheticTask a = generate_synthetic_task(16, 32, 11);
    SyntheticTask b = generate_synthetic_task(16, 32, 11);
    REQUIRE(a.kg == b.kg);
    REQUIRE(a.examples.size() == b.examples.size());
    for (std::size_t i = 0; i < a.examples.size(); ++i) {
        REQUIRE(a.examples[i].text == b.examples[i].text);
        REQUIRE(a.examples[i].label == b.examples[i].label);
    }
}

TEST_CASE("forward pass identities") {
    SyntheticTask task = generate_synthetic_task(16, 16, 21);
    RunConfig cfg = tiny_config();
    KnowledgeGraph sample = sample_fraction(task.kg, cfg.kg_fraction, cfg.kg_seed);
    Vocabulary vocab = build_vocabulary(task.examples);
    PipelineModels models = init_models(vocab, sample, 2, cfg);

    // entity-free example ("sep" is in the vocabulary but not the KG):
    // GEL is exactly zero and L = PL + 0 + RL
    TaskExample no_kg;
    no_kg.label = 1;
    no_kg.text = "[SEP] [SEP]";
    ForwardResult fr = forward_rdr(no_kg, models, sample, cfg, 99);
    REQUIRE(fr.sub.empty());
    REQUIRE(fr.gel.scalar() == 0.0);
    REQUIRE(fr.total.scalar() == (1.0 * fr.pl.scalar() + 1.0 * fr.gel.scalar()) +
                                     1.0 * fr.rl.scalar());

    // component sum identity on a KG-bearing example, bit for bit
    ForwardResult full = forward_rdr(task.examples[0], models, sample, cfg, 7);
    REQUIRE(full.total.scalar() ==
            (cfg.w_pl * full.pl.scalar() + cfg.w_gel * full.gel.scalar()) +
                cfg.w_rl * full.rl.scalar());

    // baseline optimized loss equals RL to 0 ulps, on the same graph
    ForwardResult base = forward_baseline(task.examples[0], models, sample, cfg, 7);
    REQUIRE(base.total.scalar() == base.rl.scalar());

    // identical initialization: baseline and rdr step-0 logits agree
    for (std::size_t c = 0; c < full.z.size(); ++c)
        REQUIRE(full.z.at(c) == base.z.at(c));
}

TEST_CASE("unit-weight sum example: 0.5 + 0.2 + 0.3 = 1.0") {
    Tensor pl = Tensor::scalar_const(0.5);
    Tensor gel = Tensor::scalar_const(0.2);
    Tensor rl = Tensor::scalar_const(0.3);
    REQUIRE(combine_losses(pl, gel, rl, 1, 1, 1).scalar() == Approx(1.0).margin(1e-15));
}

TEST_CASE("training with zero learning rate is a fixed point") {
    SyntheticTask task = generate_synthetic_task(16, 24, 31);
    RunConfig cfg = tiny_config();
    cfg.epochs = 0;
    TrainResult init = train(task.examples, task.kg, cfg);

    cfg.epochs = 2;
    cfg.learning_rate = 0.0;
    TrainResult frozen = train(task.examples, task.kg, cfg);
    REQUIRE(checkpoint_string(init.models.registry) ==
            checkpoint_string(frozen.models.registry));
}

TEST_CASE("training is bit-deterministic across invocations") {
    SyntheticTask task = generate_synthetic_task(16, 24, 41);
    RunConfig cfg = tiny_config();
    TrainResult a = train(task.examples, task.kg, cfg);
    TrainResult b = train(task.examples, task.kg, cfg);
    REQUIRE(checkpoint_string(a.models.registry) == checkpoint_string(b.models.registry));
    REQUIRE(a.report.csv() == b.report.csv());
}

TEST_CASE("per-batch optimized loss equals the weighted component sum bit-exactly") {
    SyntheticTask task = generate_synthetic_task(16, 24, 51);
    RunConfig cfg = tiny_config();
    cfg.w_pl = 0.7;
    cfg.w_gel = 1.3;
    cfg.w_rl = 2.0;
    TrainResult r = train(task.examples, task.kg, cfg);
    REQUIRE_FALSE(r.report.batches.empty());
    for (const BatchRow& row : r.report.batches)
        REQUIRE(row.total == (cfg.w_pl * row.pl + cfg.w_gel * row.gel) + cfg.w_rl * row.rl);
}

TEST_CASE("rdr with weights (0,0,1) reproduces baseline checkpoints byte for byte") {
    SyntheticTask task = generate_synthetic_task(16, 24, 61);
    RunConfig rdr_cfg = tiny_config();
    rdr_cfg.epochs = 3;
    rdr_cfg.mode = RunMode::rdr;
    rdr_cfg.w_pl = 0.0;
    rdr_cfg.w_gel = 0.0;
    rdr_cfg.w_rl = 1.0;

    RunConfig base_cfg = tiny_config();
    base_cfg.epochs = 3;
    base_cfg.mode = RunMode::baseline;

    TrainResult a = train(task.examples, task.kg, rdr_cfg);
    TrainResult b = train(task.examples, task.kg, base_cfg);
    REQUIRE(checkpoint_string(a.models.registry) == checkpoint_string(b.models.registry));
}

TEST_CASE("five epochs of rdr training reduce the loss") {
    SyntheticTask task = generate_synthetic_task(24, 64, 71);
    RunConfig cfg = tiny_config();
    cfg.epochs = 5;
    cfg.batch_size = 8;
    TrainResult r = train(task.examples, task.kg, cfg);
    REQUIRE(r.report.epochs.size() == 5);
    REQUIRE(r.report.epochs.back().total < r.report.epochs.front().total);
}

TEST_CASE("full KG context with a large hop threshold stays finite") {
    SyntheticTask task = generate_synthetic_task(16, 16, 81);
    RunConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.kg_fraction = 1.0;
    cfg.hop_threshold = 10;
    TrainResult r = train(task.examples, task.kg, cfg);
    for (const BatchRow& row : r.report.batches) {
        REQUIRE(std::isfinite(row.gel));
        REQUIRE(std::isfinite(row.total));
    }
}

TEST_CASE("exploding learning rate aborts with a numeric error") {
    SyntheticTask task = generate_synthetic_task(16, 16, 91);
    RunConfig cfg = tiny_config();
    cfg.epochs = 2;
    cfg.learning_rate = 1e200;
    REQUIRE_THROWS_AS(train(task.examples, task.kg, cfg), numeric_error);
}

TEST_CASE("evaluate on forced predictions gives the base rate") {
    SyntheticTask task = generate_synthetic_task(16, 32, 101);
    RunConfig cfg = tiny_config();
    cfg.epochs = 0;
    TrainResult r = train(task.examples, task.kg, cfg);

    // force class 0: zero weights, one-sided bias
    auto& w = r.models.head.weight.values_mut();
    std::fill(w.begin(), w.end(), 0.0);
    r.models.head.bias.values_mut() = {10.0, 0.0};

    EvalResult ev = evaluate(r.models, task.examples, r.kg_sample, cfg);
    REQUIRE(ev.accuracy == Approx(0.5));
    REQUIRE(ev.per_class[0][0] == ev.per_class[0][1]); // all negatives correct
    REQUIRE(ev.per_class[1][0] == 0);

    EvalResult again = evaluate(r.models, task.examples, r.kg_sample, cfg);
    REQUIRE(ev.accuracy == again.accuracy);

    std::vector<TaskExample> empty;
    REQUIRE_THROWS_AS(evaluate(r.models, empty, r.kg_sample, cfg), argument_error);
}

TEST_CASE("a memorized training set evaluates at full accuracy") {
    SyntheticTask task = generate_synthetic_task(16, 16, 111);
    std::vector<TaskExample> eight(task.examples.begin(), task.examples.begin() + 8);
    RunConfig cfg = tiny_config();
    cfg.mode = RunMode::baseline;
    cfg.epochs = 300;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.5;
    TrainResult r = train(eight, task.kg, cfg);
    REQUIRE(r.report.epochs.back().rl < 0.05);
    EvalResult ev = evaluate(r.models, eight, r.kg_sample, cfg);
    REQUIRE(ev.accuracy == Approx(1.0));
}

TEST_CASE("compare_runs of identical configs reports exactly zero difference") {
    SyntheticTask task = generate_synthetic_task(16, 32, 121);
    RunConfig cfg = tiny_config();
    cfg.epochs = 1;
    Comparison cmp = compare_runs(task.examples, task.kg, cfg, cfg, {1, 2});
    REQUIRE(cmp.difference == 0.0);
    REQUIRE(cmp.mean_a == cmp.mean_b);
    // report means equal the arithmetic mean of the per-seed numbers
    REQUIRE(std::fabs(cmp.mean_a -
                      (cmp.per_seed[0].acc_a + cmp.per_seed[1].acc_a) / 2.0) <= 1e-12);
}

TEST_CASE("full-pipeline gradient check passes at 1e-4") {
    SyntheticTask task = generate_synthetic_task(16, 16, 42);
    RunConfig cfg;
    cfg.dim_embed = 8;
    cfg.dim_hidden = 8;
    cfg.dim_graph = 8;
    cfg.kg_fraction = 1.0;
    auto report = pipeline_grad_check(task.examples, 2, task.kg, cfg);
    INFO("elements " << report.elements << " worst " << report.param << "[" << report.index
                     << "] analytic " << report.analytic << " numeric " << report.numeric);
    REQUIRE(report.max_rel_error <= 1e-4);
}

TEST_CASE("subgraph remapping onto a sampled graph drops missing nodes") {
    KnowledgeGraph full;
    full.add_triple("a", "Synonym", "b");
    full.add_triple("b", "IsA", "c");
    KnowledgeGraph part;
    part.add_triple("b", "IsA", "c"); // 'a' did not survive sampling

    Subgraph sub = pipeline_extract("a b", full, {3, 1});
    REQUIRE(sub.nodes.size() == 3);
    Subgraph mapped = detail::remap_subgraph(sub, full, part);
    std::set<std::string> names;
    for (int n : mapped.nodes) names.insert(part.node_name(n));
    REQUIRE(names == std::set<std::string>{"b", "c"});
    REQUIRE(mapped.triples.size() == 1);
    REQUIRE(mapped.seed_entities.size() == 1);
    REQUIRE(part.node_name(mapped.seed_entities[0]) == "b");
}

TEST_CASE("evaluating against the full KG is deterministic and well-formed") {
    SyntheticTask task = generate_synthetic_task(16, 16, 161);
    RunConfig cfg = tiny_config();
    cfg.kg_fraction = 0.5;
    cfg.epochs = 0;
    TrainResult r = train(task.examples, task.kg, cfg);
    EvalResult a = evaluate(r.models, task.examples, r.kg_sample, cfg, &task.kg);
    EvalResult b = evaluate(r.models, task.examples, r.kg_sample, cfg, &task.kg);
    REQUIRE(a.accuracy == b.accuracy);
    REQUIRE(a.examples == task.examples.size());
}

TEST_CASE("dataset files round trip") {
    SyntheticTask task = generate_synthetic_task(16, 16, 131);
    std::ostringstream out;
    save_dataset(task.examples, out);
    std::istringstream in(out.str());
    auto loaded = load_dataset(in);
    REQUIRE(loaded.size() == task.examples.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        REQUIRE(loaded[i].text == task.examples[i].text);
        REQUIRE(loaded[i].label == task.examples[i].label);
    }
    std::istringstream bad("1\tok\nno tab here\n");
    REQUIRE_THROWS_AS(load_dataset(bad), parse_error);
}

TEST_CASE("config files parse, override, and reject unknown keys") {
    std::istringstream in(
        "mode = baseline\n"
        "# comment\n"
        "batch_size = 4\n"
        "learning_rate = 0.25\n"
        "tau = auto\n"
        "hits_k = 1,5\n"
        "w_gel = 0.5\n");
    RunConfig cfg = load_config(in);
    REQUIRE(cfg.mode == RunMode::baseline);
    REQUIRE(cfg.batch_size == 4);
    REQUIRE(cfg.learning_rate == 0.25);
    REQUIRE_FALSE(cfg.link.tau.has_value());
    REQUIRE(cfg.link.hits_k == std::vector<int>{1, 5});
    REQUIRE(cfg.w_gel == 0.5);

    std::istringstream bad("no_such_key = 3\n");
    REQUIRE_THROWS_AS(load_config(bad), parse_error);

    RunConfig invalid;
    invalid.batch_size = 0;
    REQUIRE_THROWS_AS(invalid.validate(), argument_error);
    invalid = RunConfig{};
    invalid.kg_fraction = 0.0;
    REQUIRE_THROWS_AS(invalid.validate(), argument_error);
    invalid = RunConfig{};
    invalid.w_gel = -1.0;
    REQUIRE_THROWS_AS(invalid.validate(), argument_error);

    // round trip through the kv dump
    std::istringstream again(config_to_kv(cfg));
    RunConfig cfg2 = load_config(again);
    REQUIRE(cfg2.mode == RunMode::baseline);
    REQUIRE(cfg2.batch_size == 4);
    REQUIRE(config_to_kv(cfg2) == config_to_kv(cfg));
}

TEST_CASE("csv report has the pinned header and one row per epoch") {
    SyntheticTask task = generate_synthetic_task(16, 16, 141);
    RunConfig cfg = tiny_config();
    cfg.epochs = 2;
    TrainResult r = train(task.examples, task.kg, cfg);
    const std::string csv = r.report.csv();
    REQUIRE(csv.rfind("epoch,PL,GEL,RL,L,accuracy\n", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("vocabulary files round trip") {
    SyntheticTask task = generate_synthetic_task(16, 16, 151);
    Vocabulary v = build_vocabulary(task.examples);
    const std::string path = "vocab_test.tmp";
    save_vocabulary(v, path);
    Vocabulary w = load_vocabulary(path);
    REQUIRE(v.tokens == w.tokens);
    std::remove(path.c_str());
}
