// dps: command-line front end for preference-head discovery and steering.

#include "dps/checkpoint_io.hpp"
#include "dps/decoder.hpp"
#include "dps/discovery.hpp"
#include "dps/error.hpp"
#include "dps/flops.hpp"
#include "dps/pipeline.hpp"
#include "dps/routing.hpp"
#include "dps/synth.hpp"
#include "dps/tokenizer.hpp"
#include "dps/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

using nlohmann::json;

enum ExitCode : int {
    exit_ok         = 0,
    exit_other      = 1,
    exit_usage      = 2,
    exit_io         = 3,
    exit_schema     = 4,
    exit_input      = 5,
    exit_checkpoint = 6,
    exit_divergence = 7,
};

int exit_code_for(dps::ErrorKind kind) {
    switch (kind) {
        case dps::ErrorKind::io:         return exit_io;
        case dps::ErrorKind::schema:
        case dps::ErrorKind::config:     return exit_schema;
        case dps::ErrorKind::input:
        case dps::ErrorKind::length:     return exit_input;
        case dps::ErrorKind::magic:
        case dps::ErrorKind::version:
        case dps::ErrorKind::truncated:
        case dps::ErrorKind::shape:      return exit_checkpoint;
        case dps::ErrorKind::divergence: return exit_divergence;
    }
    return exit_other;
}

void write_snapshot(const std::filesystem::path & path, const json & doc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        dps::fail(dps::ErrorKind::io, "cannot write '" + path.string() + "'");
    }
    out << doc.dump(2) << "\n";
}

std::filesystem::path snapshot_path(const std::filesystem::path & output) {
    return output.string() + ".config.json";
}

void require_file(const std::string & path) {
    if (!std::filesystem::is_regular_file(path)) {
        dps::fail(dps::ErrorKind::io, "no such file: '" + path + "'");
    }
}

dps::Split split_from_string(const std::string & s) {
    if (s == "train") {
        return dps::Split::train;
    }
    if (s == "discover") {
        return dps::Split::discover;
    }
    if (s == "eval") {
        return dps::Split::eval;
    }
    dps::fail(dps::ErrorKind::input, "unknown split '" + s + "'");
}

// ---- synth ---------------------------------------------------------------------

struct SynthArgs {
    uint64_t         seed = 7;
    std::string      out;
    dps::SynthParams params;
};

void cmd_synth(const SynthArgs & a) {
    // Same sub-seed as the bench pipeline so standalone and bench datasets agree.
    const dps::Benchmark bench = dps::generate_benchmark(a.params, dps::derive_seed(a.seed, "synth"));
    dps::save_benchmark(bench, a.out);
    dps::BenchConfig cfg;
    cfg.seed  = a.seed;
    cfg.synth = a.params;
    json snap = json::parse(dps::config_json(cfg));
    write_snapshot(snapshot_path(a.out), {{"command", "synth"}, {"seed", a.seed}, {"synth", snap.at("synth")}});
    std::cout << "wrote " << a.out << " (" << bench.users.size() << " users, " << bench.train.examples.size() << "/"
              << bench.discover.examples.size() << "/" << bench.eval.examples.size()
              << " train/discover/eval examples)\n";
}

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
    uint64_t         seed    = 7;
    size_t           threads = 1;
    std::string      data;
    std::string      out;
    dps::ModelShape  shape;
    dps::TrainConfig hyper;
    size_t           log_every = 50;
};

void cmd_train(TrainArgs & a) {
    require_file(a.data);
    const dps::Benchmark bench = dps::load_benchmark(a.data);
    a.hyper.on_step            = [&](size_t step, double loss) {
        if (a.log_every > 0 && (step + 1) % a.log_every == 0) {
            std::cerr << "step " << step + 1 << "/" << a.hyper.steps << " loss " << loss << "\n";
        }
    };
    const dps::ModelCheckpoint ckpt = dps::train_on_benchmark(bench, a.shape, a.hyper, a.seed, a.threads);
    dps::save_checkpoint(ckpt, a.out);
    dps::BenchConfig cfg;
    cfg.model = a.shape;
    cfg.train = a.hyper;
    json snap = json::parse(dps::config_json(cfg));
    write_snapshot(snapshot_path(a.out), {{"command", "train"},
                                          {"seed", a.seed},
                                          {"threads", a.threads},
                                          {"data", a.data},
                                          {"model", snap.at("model")},
                                          {"train", snap.at("train")},
                                          {"fingerprint", dps::fingerprint_hex(ckpt.fingerprint())}});
    std::cout << "wrote " << a.out << " (fingerprint " << dps::fingerprint_hex(ckpt.fingerprint()) << ")\n";
}

// ---- discover ------------------------------------------------------------------

struct DiscoverArgs {
    size_t      threads = 1;
    std::string model;
    std::string data;
    std::string split = "discover";
    size_t      topk  = 8;
    std::string out_pcs;
    std::string out_heads;
};

void cmd_discover(const DiscoverArgs & a) {
    require_file(a.model);
    require_file(a.data);
    const dps::ModelCheckpoint ckpt  = dps::load_checkpoint(a.model);
    const dps::Benchmark       bench = dps::load_benchmark(a.data);
    const dps::PcsTable        pcs   = dps::compute_pcs(ckpt, bench.split(split_from_string(a.split)).examples,
                                                        a.threads);
    const dps::HeadSet         heads = dps::select_heads(pcs, a.topk);
    dps::save_pcs(pcs, a.out_pcs);
    write_snapshot(snapshot_path(a.out_pcs), {{"command", "discover"},
                                              {"model", a.model},
                                              {"data", a.data},
                                              {"split", a.split},
                                              {"topk", a.topk},
                                              {"threads", a.threads}});
    const std::filesystem::path heads_path =
        a.out_heads.empty() ? std::filesystem::path(a.out_pcs).parent_path() / "heads.json"
                            : std::filesystem::path(a.out_heads);
    dps::save_head_set(heads, heads_path);
    std::cout << "top-" << a.topk << " heads:";
    for (const dps::HeadId & h : heads.heads) {
        std::cout << " L" << h.layer << "H" << h.head << "(" << pcs.at(h) << ")";
    }
    std::cout << "\n";
}

// ---- cluster -------------------------------------------------------------------

struct ClusterArgs {
    uint64_t    seed    = 7;
    size_t      threads = 1;
    std::string model;
    std::string data;
    uint32_t    clusters  = 3;
    size_t      topk      = 8;
    std::string weighting = "normalized";
    std::string out;
};

void cmd_cluster(const ClusterArgs & a) {
    require_file(a.model);
    require_file(a.data);
    const dps::ModelCheckpoint ckpt   = dps::load_checkpoint(a.model);
    const dps::Benchmark       bench  = dps::load_benchmark(a.data);
    const auto &               disc   = bench.discover.examples;
    const auto                 tables = dps::per_example_pcs(ckpt, disc, a.threads);
    const dps::HeadWeighting   w      = a.weighting == "binary" ? dps::HeadWeighting::binary
                                                                : dps::HeadWeighting::normalized_pcs;
    const dps::ClusterFit fit = dps::fit_clusters(ckpt, dps::user_profiles(bench, dps::Split::discover), disc, tables,
                                                  a.topk, a.clusters, dps::derive_seed(a.seed, "kmeans"), w);
    dps::save_cluster_model(fit.model, a.out);
    write_snapshot(snapshot_path(a.out), {{"command", "cluster"},
                                          {"seed", a.seed},
                                          {"model", a.model},
                                          {"data", a.data},
                                          {"clusters", a.clusters},
                                          {"topk", a.topk},
                                          {"weighting", a.weighting},
                                          {"threads", a.threads}});
    for (size_t i = 0; i < fit.profiles.size(); ++i) {
        std::cout << fit.profiles[i].user_id << " -> cluster " << fit.assignment[i] << "\n";
    }
}

// ---- decode --------------------------------------------------------------------

struct DecodeArgs {
    std::string              model;
    std::string              heads; // dps-pcs or dps-heads file
    std::string              clusters;
    std::string              routing     = "hard";
    double                   route_temp  = 0.1;
    size_t                   topk        = 8;
    std::string              data;
    std::string              split = "eval";
    size_t                   index = 0;
    std::string              user;
    std::vector<std::string> profile;
    std::string              input;
    std::string              strategy = "greedy";
    std::string              mask_scope = "all";
    std::optional<double>    margin;
    std::string              trace;
    bool                     vanilla = false;
    dps::DecodeConfig        config;
};

dps::SuppressionMap heads_suppression(const DecodeArgs & a, const dps::ModelConfig & mc) {
    std::ifstream in(a.heads);
    json          doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception &) {
        dps::fail(dps::ErrorKind::schema, "'" + a.heads + "' is not valid JSON");
    }
    const std::string format = doc.value("format", "");
    if (format == "dps-pcs") {
        return dps::SuppressionMap::binary(mc, dps::select_heads(dps::load_pcs(a.heads), a.topk).heads);
    }
    if (format == "dps-heads") {
        return dps::SuppressionMap::binary(mc, dps::load_head_set(a.heads).heads);
    }
    dps::fail(dps::ErrorKind::schema, "'" + a.heads + "' is neither a PCS table nor a head set");
}

void cmd_decode(DecodeArgs & a) {
    require_file(a.model);
    const dps::ModelCheckpoint ckpt = dps::load_checkpoint(a.model);
    const dps::ModelConfig &   mc   = ckpt.config();
    const dps::Tokenizer       tok  = dps::Tokenizer::for_checkpoint(ckpt);

    dps::Example ex;
    if (!a.data.empty()) {
        require_file(a.data);
        const dps::Benchmark bench = dps::load_benchmark(a.data);
        const auto &         exs   = bench.split(split_from_string(a.split)).examples;
        if (a.index >= exs.size()) {
            dps::fail(dps::ErrorKind::input, "example index " + std::to_string(a.index) + " out of range");
        }
        ex = exs[a.index];
    } else {
        if (a.user.empty()) {
            dps::fail(dps::ErrorKind::input, "decode needs --data or --user");
        }
        ex = dps::Example{a.user, a.profile, a.input, {}};
    }

    a.config.strategy   = dps::strategy_from_string(a.strategy);
    a.config.mask_scope = a.mask_scope == "decode" ? dps::MaskScope::decode_only : dps::MaskScope::all_positions;
    a.config.plausibility_margin = a.margin;

    const dps::TokenSequence ctx = tok.encode_context(ex, mc.max_seq_len, true, a.config.max_new_tokens);
    dps::DecodeTrace         trace;
    if (a.vanilla) {
        trace = dps::vanilla_decode(ckpt, ctx, a.config);
    } else {
        dps::SuppressionMap supp;
        if (!a.clusters.empty()) {
            require_file(a.clusters);
            const dps::ClusterModel cm = dps::load_cluster_model(a.clusters);
            const dps::UserProfile  profile{ex.user_id, ex.profile_texts, {}};
            const auto              emb = dps::embed_profile(ckpt, profile);
            const auto routing = dps::route(emb, cm, dps::routing_mode_from_string(a.routing), a.route_temp);
            supp               = dps::build_suppression(routing, cm);
        } else if (!a.heads.empty()) {
            require_file(a.heads);
            supp = heads_suppression(a, mc);
        } else {
            dps::fail(dps::ErrorKind::input, "decode needs --heads or --clusters (or --vanilla)");
        }
        trace = dps::dps_decode(ckpt, ctx, supp, a.config);
    }
    if (!a.trace.empty()) {
        dps::write_trace_jsonl(trace, a.trace);
        write_snapshot(snapshot_path(a.trace), {{"command", "decode"},
                                                {"model", a.model},
                                                {"heads", a.heads},
                                                {"clusters", a.clusters},
                                                {"routing", a.routing},
                                                {"routing_temperature", a.route_temp},
                                                {"topk", a.topk},
                                                {"gamma", a.config.gamma},
                                                {"strategy", std::string(dps::to_string(a.config.strategy))},
                                                {"temperature", a.config.temperature},
                                                {"top_k_sampling", a.config.top_k},
                                                {"seed", a.config.seed},
                                                {"max_new_tokens", a.config.max_new_tokens},
                                                {"mask_scope", a.mask_scope},
                                                {"plausibility_margin", a.margin ? json(*a.margin) : json(nullptr)},
                                                {"vanilla", a.vanilla}});
    }
    std::cout << dps::Tokenizer::decode(trace.tokens) << "\n";
}

// ---- bench ---------------------------------------------------------------------

struct BenchArgs {
    std::string             config;
    std::string             out = "dps-bench";
    std::optional<uint64_t> seed;
    std::optional<size_t>   threads;
    std::optional<size_t>   steps;
    bool                    quiet = false;
};

void cmd_bench(const BenchArgs & a) {
    dps::BenchConfig cfg;
    if (!a.config.empty()) {
        require_file(a.config);
        cfg = dps::load_bench_config(a.config);
    }
    if (a.seed) {
        cfg.seed = *a.seed;
    }
    if (a.threads) {
        cfg.threads = *a.threads;
    }
    if (a.steps) {
        cfg.train.steps = *a.steps;
    }
    const auto artifacts = dps::run_bench(cfg, [&](const std::string & stage) {
        if (!a.quiet) {
            std::cerr << "[bench] " << stage << "\n";
        }
    });
    dps::write_bench_dir(artifacts, a.out);
    std::cout << "wrote " << a.out << "\n";
}

// ---- flops ---------------------------------------------------------------------

struct FlopsArgs {
    uint64_t prompt_len = 1024;
    uint64_t gen_len    = 32;
    unsigned passes     = 2;
    uint64_t calib_prompt = 1024;
    uint64_t calib_gen    = 32;
    double   calib_tflop  = 13.04;
    std::optional<double> params;
    bool     no_attention = false;
};

void cmd_flops(const FlopsArgs & a) {
    dps::FlopsModel m = dps::FlopsModel::llama3_8b_like();
    m.counts_attention_quadratic = !a.no_attention;
    if (a.params) {
        m.num_params_effective = *a.params;
    } else {
        m = dps::calibrate_flops(m, a.calib_prompt, a.calib_gen, a.calib_tflop);
    }
    const auto base = dps::estimate_flops(m, a.prompt_len, a.gen_len, 1);
    const auto est  = dps::estimate_flops(m, a.prompt_len, a.gen_len, a.passes);
    const json doc{{"config",
                    {{"prompt_len", a.prompt_len},
                     {"gen_len", a.gen_len},
                     {"passes", a.passes},
                     {"num_params_effective", m.num_params_effective},
                     {"attention_quadratic", m.counts_attention_quadratic},
                     {"calibrated", !a.params.has_value()}}},
                   {"prefill_tflop", est.prefill},
                   {"decode_tflop", est.decode},
                   {"total_tflop", est.total},
                   {"overhead_ratio", est.total / base.total}};
    std::cout << doc.dump(2) << "\n";
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Preference-head discovery and differential preference steering"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every subcommand");

    SynthArgs synth;
    auto *    s = app.add_subcommand("synth", "Generate a synthetic personalization benchmark");
    s->add_option("--seed", synth.seed, "Global seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output benchmark JSON")->required();
    s->add_option("--clusters", synth.params.num_clusters, "Preference clusters")->capture_default_str();
    s->add_option("--users-per-cluster", synth.params.users_per_cluster, "Users per cluster")->capture_default_str();
    s->add_option("--block-size", synth.params.block_size, "Preferred-vocabulary block size")->capture_default_str();
    s->add_option("--strength", synth.params.preference_strength, "Base preference strength")->capture_default_str();
    s->add_option("--marker-rate", synth.params.marker_rate, "Style-marker insertion rate")->capture_default_str();
    s->add_option("--train-per-user", synth.params.train_per_user, "Train examples per user")->capture_default_str();
    s->add_option("--discover-per-user", synth.params.discover_per_user, "Discovery examples per user")
        ->capture_default_str();
    s->add_option("--eval-per-user", synth.params.eval_per_user, "Eval examples per user")->capture_default_str();

    TrainArgs train;
    auto *    t = app.add_subcommand("train", "Train the toy transformer on a benchmark's train split");
    t->add_option("--data", train.data, "Benchmark JSON")->required();
    t->add_option("--out", train.out, "Output checkpoint")->required();
    t->add_option("--seed", train.seed, "Global seed")->capture_default_str();
    t->add_option("--threads", train.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    t->add_option("--layers", train.shape.num_layers, "Transformer layers")->capture_default_str();
    t->add_option("--heads", train.shape.num_heads, "Attention heads per layer")->capture_default_str();
    t->add_option("--d-head", train.shape.d_head, "Per-head width")->capture_default_str();
    t->add_option("--d-ff", train.shape.d_ff, "Feed-forward width")->capture_default_str();
    t->add_option("--max-seq-len", train.shape.max_seq_len, "Context length")->capture_default_str();
    t->add_option("--steps", train.hyper.steps, "Optimizer steps")->capture_default_str();
    t->add_option("--batch-size", train.hyper.batch_size, "Examples per step")->capture_default_str();
    t->add_option("--lr", train.hyper.learning_rate, "Peak learning rate")->capture_default_str();
    t->add_option("--warmup", train.hyper.warmup_steps, "Warmup steps")->capture_default_str();
    t->add_option("--grad-clip", train.hyper.grad_clip, "Global gradient-norm clip (<= 0 disables)")
        ->capture_default_str();
    t->add_option("--log-every", train.log_every, "Loss log interval (0 = silent)")->capture_default_str();

    DiscoverArgs disc;
    auto *       d = app.add_subcommand("discover", "Compute preference contribution scores and select heads");
    d->add_option("--model", disc.model, "Checkpoint")->required();
    d->add_option("--data", disc.data, "Benchmark JSON")->required();
    d->add_option("--split", disc.split, "Split to score on")->capture_default_str()->check(
        CLI::IsMember({"train", "discover", "eval"}));
    d->add_option("--topk", disc.topk, "Heads to select")->capture_default_str();
    d->add_option("--out", disc.out_pcs, "Output PCS table")->required();
    d->add_option("--heads-out", disc.out_heads, "Output head set (default: heads.json next to --out)");
    d->add_option("--threads", disc.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    ClusterArgs clus;
    auto *      c = app.add_subcommand("cluster", "Cluster user profiles and select per-cluster heads");
    c->add_option("--model", clus.model, "Checkpoint")->required();
    c->add_option("--data", clus.data, "Benchmark JSON")->required();
    c->add_option("--clusters", clus.clusters, "Number of clusters")->capture_default_str();
    c->add_option("--topk", clus.topk, "Heads per cluster")->capture_default_str();
    c->add_option("--weighting", clus.weighting, "Head importance")->capture_default_str()->check(
        CLI::IsMember({"normalized", "binary"}));
    c->add_option("--seed", clus.seed, "Global seed")->capture_default_str();
    c->add_option("--out", clus.out, "Output cluster model")->required();
    c->add_option("--threads", clus.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    DecodeArgs dec;
    auto *     g = app.add_subcommand("decode", "Generate with differential preference steering");
    g->add_option("--model", dec.model, "Checkpoint")->required();
    g->add_option("--heads", dec.heads, "PCS table or head set selecting the suppressed heads");
    g->add_option("--topk", dec.topk, "Heads taken from a PCS table")->capture_default_str();
    g->add_option("--clusters", dec.clusters, "Cluster model for routed suppression");
    g->add_option("--routing", dec.routing, "Routing mode")->capture_default_str()->check(
        CLI::IsMember({"hard", "soft"}));
    g->add_option("--routing-temperature", dec.route_temp, "Soft routing temperature")->capture_default_str();
    g->add_option("--data", dec.data, "Benchmark JSON holding the prompt example");
    g->add_option("--split", dec.split, "Split of the prompt example")->capture_default_str()->check(
        CLI::IsMember({"train", "discover", "eval"}));
    g->add_option("--index", dec.index, "Index of the prompt example")->capture_default_str();
    g->add_option("--user", dec.user, "User id (when not using --data)");
    g->add_option("--profile", dec.profile, "Profile text (repeatable)");
    g->add_option("--input", dec.input, "Input text");
    g->add_option("--gamma", dec.config.gamma, "Personalization strength")->capture_default_str();
    g->add_option("--max-new-tokens", dec.config.max_new_tokens, "Tokens to generate")->capture_default_str();
    g->add_option("--strategy", dec.strategy, "greedy | sample | top-k")->capture_default_str()->check(
        CLI::IsMember({"greedy", "sample", "temperature", "top-k"}));
    g->add_option("--temperature", dec.config.temperature, "Sampling temperature")->capture_default_str();
    g->add_option("--top-k-sampling", dec.config.top_k, "Candidates kept by top-k sampling")->capture_default_str();
    g->add_option("--seed", dec.config.seed, "Sampling seed")->capture_default_str();
    g->add_option("--mask-scope", dec.mask_scope, "all | decode")->capture_default_str()->check(
        CLI::IsMember({"all", "decode"}));
    g->add_option("--plausibility-margin", dec.margin, "Drop tokens this many nats below the best unsteered token");
    g->add_option("--trace", dec.trace, "Write the per-step trace as JSON lines");
    g->add_flag("--vanilla", dec.vanilla, "Decode without steering");

    BenchArgs bench;
    auto *    b = app.add_subcommand("bench", "Run the full pipeline and write a report directory");
    b->add_option("--config", bench.config, "Bench config JSON");
    b->add_option("--out", bench.out, "Output directory")->capture_default_str();
    b->add_option("--seed", bench.seed, "Global seed (overrides the config)");
    b->add_option("--threads", bench.threads, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
    b->add_option("--steps", bench.steps, "Training steps (overrides the config)");
    b->add_flag("--quiet", bench.quiet, "No progress output");

    FlopsArgs fl;
    auto *    f = app.add_subcommand("flops", "Estimate inference FLOPs for an 8B-class model");
    f->add_option("--prompt-len", fl.prompt_len, "Prompt tokens")->capture_default_str()->check(CLI::PositiveNumber);
    f->add_option("--gen-len", fl.gen_len, "Generated tokens")->capture_default_str()->check(CLI::PositiveNumber);
    f->add_option("--passes", fl.passes, "Forward passes per decode step")->capture_default_str()->check(
        CLI::Range(1, 2));
    f->add_option("--params", fl.params, "Effective parameter count (skips calibration)");
    f->add_option("--calibrate-prompt", fl.calib_prompt, "Calibration prompt length")->capture_default_str();
    f->add_option("--calibrate-gen", fl.calib_gen, "Calibration generation length")->capture_default_str();
    f->add_option("--calibrate-tflop", fl.calib_tflop, "Single-pass total at the calibration point")
        ->capture_default_str();
    f->add_flag("--no-attention", fl.no_attention, "Leave out the attention-quadratic term");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*s) {
            cmd_synth(synth);
        } else if (*t) {
            cmd_train(train);
        } else if (*d) {
            cmd_discover(disc);
        } else if (*c) {
            cmd_cluster(clus);
        } else if (*g) {
            cmd_decode(dec);
        } else if (*b) {
            cmd_bench(bench);
        } else if (*f) {
            cmd_flops(fl);
        }
    } catch (const dps::Error & e) {
        std::cerr << "error [" << dps::to_string(e.kind()) << "]: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_other;
    }
    return exit_ok;
}
