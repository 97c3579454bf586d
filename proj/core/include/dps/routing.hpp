#pragma once

#include "dps/discovery.hpp"
#include "dps/example.hpp"
#include "dps/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dps {

using Vector = std::vector<double>;

struct UserProfile {
    std::string              user_id;
    std::vector<std::string> profile_texts;
    Vector                   embedding; // unit L2 norm once computed
};

// Mean over profile texts of the mean-pooled final-layer (post layer norm)
// hidden states of the text bytes, run through the unsuppressed model, then
// L2-normalized. Empty texts are skipped; all-empty throws ErrorKind::input.
Vector embed_profile(const ModelCheckpoint & checkpoint, const UserProfile & profile);

struct KMeansResult {
    std::vector<Vector> centroids;
    std::vector<size_t> assignment;
    std::vector<double> objective; // sum of squared distances after each Lloyd iteration
    size_t              iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations until the assignment stops
// changing or max_iterations is reached. An empty cluster is re-seeded to the
// point farthest from its assigned centroid. Points only switch clusters when
// another centroid is strictly closer; initial ties go to the lowest index.
// The run is repeated from `restarts` independent seedings and the one with
// the lowest final objective is returned (earliest on ties).
KMeansResult kmeans(std::span<const Vector> points, size_t num_clusters, uint64_t seed, size_t max_iterations = 100,
                    size_t restarts = 10);

enum class HeadWeighting { normalized_pcs, binary };

// A head set plus per-head importance in [0,1], parallel to heads.heads.
struct WeightedHeadSet {
    HeadSet             heads;
    std::vector<double> importance;

    bool operator==(const WeightedHeadSet &) const = default;
};

// normalized_pcs: PCS(h) / max selected PCS, clipped at 0 for non-positive
// scores. binary: 1 for every selected head.
WeightedHeadSet weight_heads(const PcsTable & pcs, const HeadSet & heads, HeadWeighting weighting);

struct ClusterModel {
    std::vector<Vector>          centroids;
    std::vector<WeightedHeadSet> cluster_heads;
    uint32_t                     num_clusters = 0;
    uint64_t                     seed         = 0;
    uint32_t                     num_layers   = 0;
    uint32_t                     num_heads    = 0;

    bool operator==(const ClusterModel &) const = default;
};

// Runs compute_pcs on each group's examples and selects k heads per group.
// Throws ErrorKind::input naming the first empty group.
std::vector<WeightedHeadSet> discover_cluster_heads(const ModelCheckpoint & checkpoint,
                                                    std::span<const std::vector<Example>> groups, size_t k,
                                                    HeadWeighting weighting = HeadWeighting::normalized_pcs,
                                                    size_t threads = 1);

// Same selection from already computed per-cluster tables.
std::vector<WeightedHeadSet> cluster_heads_from_tables(std::span<const PcsTable> tables, size_t k,
                                                       HeadWeighting weighting = HeadWeighting::normalized_pcs);

enum class RoutingMode { hard, soft };

std::string_view to_string(RoutingMode mode);
RoutingMode      routing_mode_from_string(std::string_view name);

struct RoutingAssignment {
    std::vector<double> weights; // per cluster, nonnegative, sums to 1
    RoutingMode         mode        = RoutingMode::hard;
    double              temperature = 1.0;
};

// hard: all weight on the nearest centroid (squared Euclidean, ties to the
// lowest index). soft: softmax(-||e - mu_c||^2 / temperature).
RoutingAssignment route(std::span<const double> embedding, const ClusterModel & clusters, RoutingMode mode,
                        double temperature = 1.0);

// s_h = clip(sum_c w_c * importance_c(h), 0, 1).
SuppressionMap build_suppression(const RoutingAssignment & assignment, const ClusterModel & clusters);

// Suppression map of one weighted head set (the single-cluster case).
SuppressionMap head_suppression(const WeightedHeadSet & heads, uint32_t num_layers, uint32_t num_heads);

double squared_distance(std::span<const double> a, std::span<const double> b);

void         save_cluster_model(const ClusterModel & model, const std::filesystem::path & path);
ClusterModel load_cluster_model(const std::filesystem::path & path);

} // namespace dps
