// Command-line front end: ingest, extract, generate, train, eval, compare,
// and gradcheck subcommands over the pipeline library.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "rdr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rdr;

namespace {

// Flag values are collected as (config-key, raw-string) pairs and pushed
// through the same parser as config files, so CLI overrides and file entries
// cannot drift apart.
struct ConfigFlags {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
};

void add_config_options(CLI::App* cmd, ConfigFlags& flags) {
    cmd->add_option("--config", flags.config_path, "config file (key = value lines)");
    auto add = [cmd, &flags](const std::string& flag, const std::string& key,
                             const std::string& desc) {
        cmd->add_option_function<std::string>(
            flag,
            [&flags, key](const std::string& v) { flags.overrides.emplace_back(key, v); },
            desc);
    };
    add("--mode", "mode", "rdr or baseline");
    add("--batch-size", "batch_size", "minibatch size");
    add("--epochs", "epochs", "training epochs");
    add("--lr", "learning_rate", "SGD learning rate");
    add("--kg-fraction", "kg_fraction", "fraction of the KG sampled per run");
    add("--kg-seed", "kg_seed", "seed for the KG sample");
    add("--model-seed", "model_seed", "seed for init/shuffling/corruptions");
    add("--dim-embed", "dim_embed", "token embedding width");
    add("--dim-hidden", "dim_hidden", "hidden width");
    add("--dim-graph", "dim_graph", "graph embedding width");
    add("--hop", "hop_threshold", "subgraph hop threshold");
    add("--max-span", "max_span", "entity matcher span limit");
    add("--tau", "tau", "closeness threshold, or 'auto' for the median rule");
    add("--margin", "margin", "ranking margin");
    add("--negatives", "negatives_per_positive", "corruptions per true triple");
    add("--hits", "hits_k", "comma-separated hits@k list");
    add("--w-pl", "w_pl", "paraphrasing loss weight");
    add("--w-gel", "w_gel", "graph embedding loss weight");
    add("--w-rl", "w_rl", "response loss weight");
    add("--eval-fraction", "eval_fraction", "held-out tail fraction for compare");
    add("--eval-full-kg", "eval_full_kg", "evaluate against the full KG (true/false)");
}

RunConfig resolve_config(const ConfigFlags& flags) {
    RunConfig cfg;
    if (!flags.config_path.empty()) cfg = load_config(flags.config_path, cfg);
    for (const auto& [key, value] : flags.overrides) apply_config_entry(cfg, key, value);
    cfg.validate();
    return cfg;
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw argument_error("cannot open '" + out_path + "' for writing");
    f << text;
}

int classes_from_checkpoint(const std::string& path) {
    for (const CheckpointEntry& e : read_checkpoint(path))
        if (e.name == "head.bias") return static_cast<int>(e.shape.at(0));
    throw lookup_error("checkpoint '" + path + "' has no head.bias entry");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Recap-Deliberate-Respond training pipeline"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "load a triple file and print a report");
    std::string ingest_kg, ingest_out;
    bool ingest_strict = false;
    ingest->add_option("--kg", ingest_kg, "triple file")->required();
    ingest->add_flag("--strict", ingest_strict, "reject relations outside the 35-name vocabulary");
    ingest->add_option("--out", ingest_out, "write the report here instead of stdout");
    ingest->callback([&] {
        LoadResult r = load_triples(ingest_kg, ingest_strict);
        emit(r.report.to_kv(), ingest_out);
    });

    // extract
    auto* extract = app.add_subcommand("extract", "extract a subgraph for a text");
    std::string extract_kg, extract_text, extract_out;
    int extract_span = 3, extract_hop = 2;
    extract->add_option("--kg", extract_kg, "triple file")->required();
    extract->add_option("--text", extract_text, "input text")->required();
    extract->add_option("--max-span", extract_span, "entity matcher span limit");
    extract->add_option("--hop", extract_hop, "hop threshold");
    extract->add_option("--out", extract_out, "write the dump here instead of stdout");
    extract->callback([&] {
        LoadResult r = load_triples(extract_kg, false);
        Subgraph sub = pipeline_extract(extract_text, r.kg, {extract_span, extract_hop});
        std::ostringstream out;
        dump_subgraph(sub, r.kg, out);
        emit(out.str(), extract_out);
    });

    // generate
    auto* generate = app.add_subcommand("generate", "emit a synthetic task dataset and KG");
    int gen_entities = 40, gen_examples = 400;
    std::uint64_t gen_seed = 1;
    std::string gen_dataset = "dataset.tsv", gen_kg = "kg.tsv";
    generate->add_option("--entities", gen_entities, "KG entity count");
    generate->add_option("--examples", gen_examples, "example count");
    generate->add_option("--seed", gen_seed, "generator seed");
    generate->add_option("--dataset", gen_dataset, "dataset output path");
    generate->add_option("--kg-out", gen_kg, "KG output path");
    generate->callback([&] {
        SyntheticTask task = generate_synthetic_task(gen_entities, gen_examples, gen_seed);
        save_dataset(task.examples, gen_dataset);
        save_triples(task.kg, gen_kg);
        std::cout << "examples = " << task.examples.size() << "\n"
                  << "kg_triples = " << task.kg.triple_count() << "\n"
                  << "kg_nodes = " << task.kg.node_count() << "\n";
    });

    // train
    auto* train_cmd = app.add_subcommand("train", "train and write checkpoints + reports");
    std::string train_dataset, train_kg, train_dir = "run";
    ConfigFlags train_flags;
    train_cmd->add_option("--dataset", train_dataset, "dataset file")->required();
    train_cmd->add_option("--kg", train_kg, "triple file")->required();
    train_cmd->add_option("--out-dir", train_dir, "output directory");
    add_config_options(train_cmd, train_flags);
    train_cmd->callback([&] {
        RunConfig cfg = resolve_config(train_flags);
        auto dataset = load_dataset(train_dataset);
        KnowledgeGraph kg = load_triples(train_kg, false).kg;
        TrainResult r = train(dataset, kg, cfg);

        fs::create_directories(train_dir);
        save_checkpoint(r.models.registry, train_dir + "/model.ckpt");
        save_vocabulary(r.models.vocab, train_dir + "/model.vocab");
        export_embeddings(r.models.graph, r.kg_sample, train_dir + "/embeddings.ckpt");
        {
            std::ofstream csv(train_dir + "/losses.csv", std::ios::binary);
            csv << r.report.csv();
        }
        {
            std::ofstream rep(train_dir + "/report.txt", std::ios::binary);
            rep << "mode = " << mode_name(cfg.mode) << "\n"
                << "examples = " << dataset.size() << "\n"
                << "kg_sample_triples = " << r.kg_sample.triple_count() << "\n"
                << r.report.summary_kv();
        }
        std::cout << r.report.summary_kv();
        std::cout << "artifacts = " << train_dir << "/{model.ckpt,model.vocab,embeddings.ckpt,losses.csv,report.txt}\n";
    });

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_dataset, eval_kg, eval_ckpt, eval_vocab, eval_out;
    ConfigFlags eval_flags;
    eval_cmd->add_option("--dataset", eval_dataset, "dataset file")->required();
    eval_cmd->add_option("--kg", eval_kg, "triple file")->required();
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--vocab", eval_vocab, "vocabulary file written by train")->required();
    eval_cmd->add_option("--out", eval_out, "write the report here instead of stdout");
    add_config_options(eval_cmd, eval_flags);
    eval_cmd->callback([&] {
        RunConfig cfg = resolve_config(eval_flags);
        auto dataset = load_dataset(eval_dataset);
        KnowledgeGraph kg = load_triples(eval_kg, false).kg;
        KnowledgeGraph sample = sample_fraction(kg, cfg.kg_fraction, cfg.kg_seed);
        Vocabulary vocab = load_vocabulary(eval_vocab);
        PipelineModels models =
            init_models(vocab, sample, classes_from_checkpoint(eval_ckpt), cfg);
        load_checkpoint(models.registry, eval_ckpt);
        EvalResult ev =
            evaluate(models, dataset, sample, cfg, cfg.eval_full_kg ? &kg : nullptr);
        emit(ev.to_kv(), eval_out);
    });

    // compare
    auto* compare = app.add_subcommand("compare", "A/B two configs over two seeds");
    std::string cmp_dataset, cmp_kg, cmp_cfg_a, cmp_cfg_b, cmp_out;
    std::vector<std::uint64_t> cmp_seeds = {1, 2};
    ConfigFlags cmp_flags;
    compare->add_option("--dataset", cmp_dataset, "dataset file")->required();
    compare->add_option("--kg", cmp_kg, "triple file")->required();
    compare->add_option("--config-a", cmp_cfg_a, "config file for side A");
    compare->add_option("--config-b", cmp_cfg_b,
                        "config file for side B (default: A as baseline)");
    compare->add_option("--seeds", cmp_seeds, "two run seeds")->expected(2);
    compare->add_option("--out", cmp_out, "write the report here instead of stdout");
    add_config_options(compare, cmp_flags);
    compare->callback([&] {
        RunConfig cfg_a;
        if (!cmp_cfg_a.empty()) cfg_a = load_config(cmp_cfg_a, cfg_a);
        for (const auto& [key, value] : cmp_flags.overrides)
            apply_config_entry(cfg_a, key, value);
        RunConfig cfg_b;
        if (!cmp_cfg_b.empty()) {
            cfg_b = load_config(cmp_cfg_b, cfg_b);
            for (const auto& [key, value] : cmp_flags.overrides)
                apply_config_entry(cfg_b, key, value);
        } else {
            cfg_b = cfg_a;
            cfg_b.mode = RunMode::baseline;
            cfg_b.w_pl = 0.0;
            cfg_b.w_gel = 0.0;
        }
        cfg_a.validate();
        cfg_b.validate();
        auto dataset = load_dataset(cmp_dataset);
        KnowledgeGraph kg = load_triples(cmp_kg, false).kg;
        Comparison cmp =
            compare_runs(dataset, kg, cfg_a, cfg_b, {cmp_seeds[0], cmp_seeds[1]});
        emit(cmp.to_kv(), cmp_out);
    });

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
    int gc_entities = 16, gc_examples = 16, gc_batch = 2;
    std::uint64_t gc_seed = 42;
    double gc_epsilon = 1e-5;
    gradcheck->add_option("--entities", gc_entities, "synthetic KG entity count");
    gradcheck->add_option("--examples", gc_examples, "synthetic example count");
    gradcheck->add_option("--batch", gc_batch, "batch size for the checked loss");
    gradcheck->add_option("--seed", gc_seed, "synthetic task seed");
    gradcheck->add_option("--epsilon", gc_epsilon, "central difference step");
    gradcheck->callback([&] {
        SyntheticTask task = generate_synthetic_task(gc_entities, gc_examples, gc_seed);
        RunConfig cfg;
        cfg.dim_embed = 8;
        cfg.dim_hidden = 8;
        cfg.dim_graph = 8;
        cfg.kg_fraction = 1.0;
        GradCheckReport rep = pipeline_grad_check(
            task.examples, static_cast<std::size_t>(gc_batch), task.kg, cfg, gc_epsilon);
        std::cout << "elements = " << rep.elements << "\n"
                  << "max_rel_error = " << format_double(rep.max_rel_error) << "\n"
                  << "worst_param = " << rep.param << "[" << rep.index << "]\n"
                  << "analytic = " << format_double(rep.analytic) << "\n"
                  << "numeric = " << format_double(rep.numeric) << "\n";
        if (rep.max_rel_error > 1e-4) throw numeric_error("gradient check failed");
    });

    try {
        CLI11_PARSE(app, argc, argv);
    } catch (const rdr::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
