#pragma once

#include "dps/example.hpp"
#include "dps/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dps {

// Ground-truth preference structure of one synthetic user.
struct PreferenceSpec {
    uint32_t             cluster_id = 0;
    std::vector<TokenId> preferred_vocab;           // sorted, disjoint across clusters
    double               preference_strength = 1.0; // P(preferred | non-marker token)
    std::vector<TokenId> style_markers;             // drawn from the generic block

    bool operator==(const PreferenceSpec &) const = default;
};

using UserSpecs = std::map<std::string, PreferenceSpec>;

// Byte-token vocabulary carved into one preferred block per cluster; the
// bytes left over form the generic block used for inputs and style markers.
struct VocabPartition {
    uint32_t block_size = 64;

    std::vector<TokenId> cluster_block(uint32_t cluster) const;
    std::vector<TokenId> generic_block(uint32_t num_clusters) const;
};

enum class Split { train, discover, eval };

std::string_view to_string(Split split);

struct DatasetHandle {
    Split                split = Split::train;
    std::vector<Example> examples;
    uint64_t             generator_seed = 0;
    UserSpecs            users;

    bool operator==(const DatasetHandle &) const = default;
};

struct SequenceLengths {
    uint32_t profile_snippets = 2;
    uint32_t snippet_len      = 8;
    uint32_t input_len        = 4;
    uint32_t target_len       = 12;

    bool operator==(const SequenceLengths &) const = default;
};

struct SynthParams {
    uint32_t        num_clusters        = 3;
    uint32_t        users_per_cluster   = 8;
    uint32_t        block_size          = 64;
    double          preference_strength = 0.8;
    double          strength_jitter     = 0.05;
    uint32_t        markers_per_user    = 2;
    double          marker_rate         = 0.08;
    SequenceLengths lengths;
    uint32_t        train_per_user    = 200;
    uint32_t        discover_per_user = 64;
    uint32_t        eval_per_user     = 64;

    bool operator==(const SynthParams &) const = default;
};

// Users are named user_000, user_001, ... in cluster-major order. Members of a
// cluster share its preferred block but get their own style markers and a
// jittered strength. Throws ErrorKind::input when the blocks do not fit in
// the byte vocabulary with at least one generic token left over.
UserSpecs generate_users(uint32_t num_clusters, uint32_t users_per_cluster, const VocabPartition & partition,
                         uint64_t seed, double base_strength = 0.8, double strength_jitter = 0.05,
                         uint32_t markers_per_user = 2);

// Every non-prompt token (profile snippets and target) is a style marker with
// probability marker_rate, otherwise preferred with probability
// preference_strength and generic with the remainder. Inputs are generic.
// `exclude` lists (user_id, target) pairs already used by another split.
DatasetHandle generate_examples(const UserSpecs & specs, uint32_t count_per_user, const SequenceLengths & lengths,
                                uint64_t seed, double marker_rate = 0.08, Split split = Split::train,
                                const std::vector<std::pair<std::string, std::string>> * exclude = nullptr);

struct Benchmark {
    SynthParams   params;
    uint64_t      seed = 0;
    UserSpecs     users;
    DatasetHandle train, discover, eval;

    std::vector<std::string> user_ids() const;
    const DatasetHandle &    split(Split s) const;
    bool operator==(const Benchmark &) const = default;
};

Benchmark generate_benchmark(const SynthParams & params, uint64_t seed);

// Fraction of tokens in the preferred vocabulary. Throws on an empty sequence.
double alignment_score(std::span<const TokenId> tokens, const PreferenceSpec & spec);
// Probability mass on the preferred vocabulary.
double alignment_score(std::span<const double> distribution, const PreferenceSpec & spec);

// JSON file with params, seed, per-user specs and the three splits. Example
// texts are byte strings written as Latin-1 code points.
void      save_benchmark(const Benchmark & bench, const std::filesystem::path & path);
Benchmark load_benchmark(const std::filesystem::path & path);

std::string latin1_to_utf8(std::string_view bytes);
std::string utf8_to_latin1(std::string_view text);

} // namespace dps
