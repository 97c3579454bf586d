#pragma once

#include "dps/decoder.hpp"
#include "dps/discovery.hpp"
#include "dps/metrics.hpp"
#include "dps/model.hpp"
#include "dps/report.hpp"
#include "dps/routing.hpp"
#include "dps/synth.hpp"
#include "dps/train.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dps {

struct ModelShape {
    uint32_t num_layers  = 4;
    uint32_t num_heads   = 4;
    uint32_t d_head      = 8;
    uint32_t d_ff        = 64;
    uint32_t max_seq_len = 64;

    bool operator==(const ModelShape &) const = default;
};

ModelConfig model_config_for(const ModelShape & shape, size_t num_users, uint64_t seed);

// Everything a benchmark run depends on. All randomness derives from `seed`.
struct BenchConfig {
    uint64_t    seed    = 7;
    size_t      threads = 1;
    SynthParams synth;
    ModelShape  model;
    TrainConfig train; // seed and threads are overridden from the fields above

    size_t              topk         = 8;
    std::vector<double> gammas       = {0.0, 0.25, 0.5, 1.0, 2.0};
    std::vector<size_t> k_values     = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
    double              k_sweep_gamma = 1.0;

    uint32_t num_clusters     = 3;
    double   soft_temperature = 0.1;

    size_t control_seeds            = 20;
    size_t causal_examples_per_user = 16;

    size_t generate_per_user   = 2;
    size_t generate_tokens     = 12;
    double generate_temperature = 1.0;

    void validate() const;
};

std::string config_json(const BenchConfig & config);
// Strict: unknown keys or wrong types throw ErrorKind::schema. Missing keys
// keep their defaults.
BenchConfig bench_config_from_json(std::string_view text);
BenchConfig load_bench_config(const std::filesystem::path & path);

// ---- pipeline stages shared by the CLI and run_bench -------------------------------

ModelCheckpoint train_on_benchmark(const Benchmark & bench, const ModelShape & shape, TrainConfig hyper,
                                   uint64_t seed, size_t threads);

// Profile texts of each user gathered from one split, first occurrence order.
std::vector<UserProfile> user_profiles(const Benchmark & bench, Split split);

struct ClusterFit {
    ClusterModel             model;
    std::vector<UserProfile> profiles;   // with embeddings
    std::vector<size_t>      assignment; // parallel to profiles
    std::vector<PcsTable>    tables;     // per cluster
    KMeansResult             kmeans;
};

// Embeds profiles, clusters them and selects k heads per cluster from the
// per-example tables of the cluster's users (tables parallel to `examples`).
ClusterFit fit_clusters(const ModelCheckpoint & checkpoint, std::vector<UserProfile> profiles,
                        std::span<const Example> examples, std::span<const PcsTable> tables, size_t k,
                        uint32_t num_clusters, uint64_t seed, HeadWeighting weighting = HeadWeighting::normalized_pcs);

// Per-user suppression for a routing mode.
std::map<std::string, SuppressionMap> routed_suppression(const ClusterFit & fit, RoutingMode mode,
                                                         double temperature);

// ---- full benchmark ----------------------------------------------------------------

struct BenchArtifacts {
    BenchConfig     config;
    Benchmark       benchmark;
    ModelCheckpoint checkpoint;
    double          final_train_loss = 0.0;
    PcsTable        pcs;
    HeadSet         heads;
    ClusterFit      clusters;
    DecodeTrace     trace;
    BenchReport     report;
};

using ProgressFn = std::function<void(const std::string & stage)>;

// synth -> train -> discover -> cluster -> sweeps.
BenchArtifacts run_bench(const BenchConfig & config, const ProgressFn & progress = {});

// config.json, benchmark.json, model.dpsm, pcs.json, heads.json,
// clusters.json, trace.jsonl, report.csv, report.json, heatmaps/*.csv
void write_bench_dir(const BenchArtifacts & artifacts, const std::filesystem::path & dir);

} // namespace dps
