#include "dps/routing.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"
#include "dps/tokenizer.hpp"
#include "dps/transformer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace dps {

using nlohmann::json;

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

Vector embed_profile(const ModelCheckpoint & checkpoint, const UserProfile & profile) {
    if (profile.profile_texts.empty()) {
        fail(ErrorKind::input, "embed_profile: user '" + profile.user_id + "' has no profile texts");
    }
    const Transformer model(checkpoint);
    const Tokenizer   tok = Tokenizer::for_checkpoint(checkpoint);
    const size_t      D   = checkpoint.config().d_model;

    Vector sum(D, 0.0);
    size_t used = 0;
    for (const std::string & text : profile.profile_texts) {
        if (text.empty()) {
            continue;
        }
        const TokenSequence seq = tok.encode_profile_text(text, checkpoint.config().max_seq_len);
        ForwardOptions      opts;
        opts.logits_from = seq.size(); // hidden states only
        opts.want_hidden = true;
        const ForwardResult r = model.forward(seq.ids, opts);

        constexpr size_t kFirstText = 2; // after BOS SEP_PROFILE
        Vector           pooled(D, 0.0);
        for (size_t t = kFirstText; t < seq.size(); ++t) {
            const auto row = r.hidden.row(t);
            for (size_t i = 0; i < D; ++i) {
                pooled[i] += row[i];
            }
        }
        const double n = static_cast<double>(seq.size() - kFirstText);
        for (size_t i = 0; i < D; ++i) {
            sum[i] += pooled[i] / n;
        }
        ++used;
    }
    if (used == 0) {
        fail(ErrorKind::input, "embed_profile: all profile texts of user '" + profile.user_id + "' are empty");
    }
    double norm = 0.0;
    for (double & v : sum) {
        v /= static_cast<double>(used);
        norm += v * v;
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        fail(ErrorKind::input, "embed_profile: degenerate embedding for user '" + profile.user_id + "'");
    }
    for (double & v : sum) {
        v /= norm;
    }
    return sum;
}

namespace {

size_t nearest(std::span<const Vector> centroids, std::span<const double> p) {
    size_t best   = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < centroids.size(); ++c) {
        const double d = squared_distance(centroids[c], p);
        if (d < best_d) {
            best_d = d;
            best   = c;
        }
    }
    return best;
}

double objective(std::span<const Vector> points, std::span<const Vector> centroids,
                 std::span<const size_t> assignment) {
    double total = 0.0;
    for (size_t i = 0; i < points.size(); ++i) {
        total += squared_distance(points[i], centroids[assignment[i]]);
    }
    return total;
}

KMeansResult lloyd(std::span<const Vector> points, size_t num_clusters, uint64_t init_seed, size_t max_iterations) {
    const size_t n   = points.size();
    const size_t dim = points[0].size();

    // k-means++ seeding.
    Rng          rng(init_seed);
    KMeansResult result;
    result.centroids.push_back(points[rng.below(n)]);
    std::vector<double> d2(n);
    while (result.centroids.size() < num_clusters) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            d2[i] = squared_distance(points[i], result.centroids[nearest(result.centroids, points[i])]);
            total += d2[i];
        }
        size_t pick = 0;
        if (total > 0.0) {
            const double r   = rng.uniform() * total;
            double       acc = 0.0;
            pick             = n - 1;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (r < acc && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.below(n); // every point coincides with a centroid
        }
        result.centroids.push_back(points[pick]);
    }

    result.assignment.assign(n, 0);
    for (size_t i = 0; i < n; ++i) {
        result.assignment[i] = nearest(result.centroids, points[i]);
    }

    for (size_t iter = 0; iter < max_iterations; ++iter) {
        // Update step.
        std::vector<Vector> sums(num_clusters, Vector(dim, 0.0));
        std::vector<size_t> counts(num_clusters, 0);
        for (size_t i = 0; i < n; ++i) {
            const size_t c = result.assignment[i];
            ++counts[c];
            for (size_t j = 0; j < dim; ++j) {
                sums[c][j] += points[i][j];
            }
        }
        for (size_t c = 0; c < num_clusters; ++c) {
            if (counts[c] == 0) {
                continue;
            }
            for (size_t j = 0; j < dim; ++j) {
                result.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
            }
        }
        for (size_t c = 0; c < num_clusters; ++c) {
            if (counts[c] != 0) {
                continue;
            }
            size_t far   = 0;
            double far_d = -1.0;
            for (size_t i = 0; i < n; ++i) {
                const double d = squared_distance(points[i], result.centroids[result.assignment[i]]);
                if (d > far_d) {
                    far_d = d;
                    far   = i;
                }
            }
            result.centroids[c]    = points[far];
            result.assignment[far] = c; // keeps a second empty cluster from taking the same point
        }
        result.objective.push_back(objective(points, result.centroids, result.assignment));
        result.iterations = iter + 1;

        // Assignment step.
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            const size_t cur  = result.assignment[i];
            const size_t best = nearest(result.centroids, points[i]);
            if (best != cur &&
                squared_distance(result.centroids[best], points[i]) < squared_distance(result.centroids[cur], points[i])) {
                result.assignment[i] = best;
                changed              = true;
            }
        }
        if (!changed) {
            break;
        }
    }
    return result;
}

} // namespace

KMeansResult kmeans(std::span<const Vector> points, size_t num_clusters, uint64_t seed, size_t max_iterations,
                    size_t restarts) {
    const size_t n = points.size();
    if (num_clusters < 1) {
        fail(ErrorKind::input, "kmeans: num_clusters must be >= 1");
    }
    if (n < num_clusters) {
        fail(ErrorKind::input, "kmeans: " + std::to_string(n) + " points for " + std::to_string(num_clusters) +
                                   " clusters");
    }
    const size_t dim = points[0].size();
    for (const Vector & p : points) {
        if (p.size() != dim) {
            fail(ErrorKind::input, "kmeans: points of differing dimension");
        }
        for (double v : p) {
            if (!std::isfinite(v)) {
                fail(ErrorKind::input, "kmeans: non-finite coordinate");
            }
        }
    }
    if (restarts < 1 || max_iterations < 1) {
        fail(ErrorKind::input, "kmeans: restarts and max_iterations must be >= 1");
    }

    KMeansResult best;
    for (size_t r = 0; r < restarts; ++r) {
        KMeansResult run = lloyd(points, num_clusters, derive_seed(seed, "kmeans.init", r), max_iterations);
        if (r == 0 || run.objective.back() < best.objective.back()) {
            best = std::move(run);
        }
    }
    return best;
}

WeightedHeadSet weight_heads(const PcsTable & pcs, const HeadSet & heads, HeadWeighting weighting) {
    WeightedHeadSet out;
    out.heads = heads;
    if (weighting == HeadWeighting::binary) {
        out.importance.assign(heads.heads.size(), 1.0);
        return out;
    }
    double max_score = 0.0;
    for (const HeadId & h : heads.heads) {
        max_score = std::max(max_score, pcs.at(h));
    }
    for (const HeadId & h : heads.heads) {
        const double s = pcs.at(h);
        out.importance.push_back(max_score > 0.0 && s > 0.0 ? s / max_score : 0.0);
    }
    return out;
}

std::vector<WeightedHeadSet> cluster_heads_from_tables(std::span<const PcsTable> tables, size_t k,
                                                       HeadWeighting weighting) {
    std::vector<WeightedHeadSet> out;
    for (const PcsTable & pcs : tables) {
        out.push_back(weight_heads(pcs, select_heads(pcs, k), weighting));
    }
    return out;
}

std::vector<WeightedHeadSet> discover_cluster_heads(const ModelCheckpoint & checkpoint,
                                                    std::span<const std::vector<Example>> groups, size_t k,
                                                    HeadWeighting weighting, size_t threads) {
    std::vector<PcsTable> tables;
    for (size_t c = 0; c < groups.size(); ++c) {
        if (groups[c].empty()) {
            fail(ErrorKind::input, "discover_cluster_heads: cluster " + std::to_string(c) + " has no examples");
        }
    }
    for (const auto & group : groups) {
        tables.push_back(compute_pcs(checkpoint, group, threads));
    }
    return cluster_heads_from_tables(tables, k, weighting);
}

std::string_view to_string(RoutingMode mode) {
    return mode == RoutingMode::hard ? "hard" : "soft";
}

RoutingMode routing_mode_from_string(std::string_view name) {
    if (name == "hard") {
        return RoutingMode::hard;
    }
    if (name == "soft") {
        return RoutingMode::soft;
    }
    fail(ErrorKind::input, "unknown routing mode '" + std::string(name) + "'");
}

RoutingAssignment route(std::span<const double> embedding, const ClusterModel & clusters, RoutingMode mode,
                        double temperature) {
    if (clusters.centroids.empty()) {
        fail(ErrorKind::input, "route: cluster model has no centroids");
    }
    if (mode == RoutingMode::soft && !(temperature > 0.0)) {
        fail(ErrorKind::input, "route: soft routing needs temperature > 0");
    }
    RoutingAssignment out;
    out.mode        = mode;
    out.temperature = temperature;
    const size_t C  = clusters.centroids.size();
    out.weights.assign(C, 0.0);

    std::vector<double> d2(C);
    for (size_t c = 0; c < C; ++c) {
        d2[c] = squared_distance(clusters.centroids[c], embedding);
    }
    if (mode == RoutingMode::hard) {
        out.weights[static_cast<size_t>(std::min_element(d2.begin(), d2.end()) - d2.begin())] = 1.0;
        return out;
    }
    const double dmin = *std::min_element(d2.begin(), d2.end());
    double       sum  = 0.0;
    for (size_t c = 0; c < C; ++c) {
        out.weights[c] = std::exp(-(d2[c] - dmin) / temperature);
        sum += out.weights[c];
    }
    for (double & w : out.weights) {
        w /= sum;
    }
    return out;
}

SuppressionMap build_suppression(const RoutingAssignment & assignment, const ClusterModel & clusters) {
    if (assignment.weights.size() != clusters.cluster_heads.size()) {
        fail(ErrorKind::config, "build_suppression: assignment has " + std::to_string(assignment.weights.size()) +
                                    " weights for " + std::to_string(clusters.cluster_heads.size()) + " clusters");
    }
    const size_t        total = size_t{clusters.num_layers} * clusters.num_heads;
    std::vector<double> acc(total, 0.0);
    for (size_t c = 0; c < clusters.cluster_heads.size(); ++c) {
        const WeightedHeadSet & set = clusters.cluster_heads[c];
        for (size_t i = 0; i < set.heads.heads.size(); ++i) {
            const HeadId h = set.heads.heads[i];
            acc[size_t{h.layer} * clusters.num_heads + h.head] += assignment.weights[c] * set.importance[i];
        }
    }
    SuppressionMap map(clusters.num_layers, clusters.num_heads);
    for (uint32_t l = 0; l < clusters.num_layers; ++l) {
        for (uint32_t h = 0; h < clusters.num_heads; ++h) {
            map.set({l, h}, static_cast<float>(std::clamp(acc[size_t{l} * clusters.num_heads + h], 0.0, 1.0)));
        }
    }
    return map;
}

SuppressionMap head_suppression(const WeightedHeadSet & heads, uint32_t num_layers, uint32_t num_heads) {
    SuppressionMap map(num_layers, num_heads);
    for (size_t i = 0; i < heads.heads.heads.size(); ++i) {
        map.set(heads.heads.heads[i], static_cast<float>(std::clamp(heads.importance[i], 0.0, 1.0)));
    }
    return map;
}

void save_cluster_model(const ClusterModel & model, const std::filesystem::path & path) {
    json heads = json::array();
    for (const WeightedHeadSet & set : model.cluster_heads) {
        json list = json::array();
        for (size_t i = 0; i < set.heads.heads.size(); ++i) {
            list.push_back(json::array({set.heads.heads[i].layer, set.heads.heads[i].head, set.importance[i]}));
        }
        heads.push_back(json{{"k", set.heads.k}, {"heads", std::move(list)}});
    }
    const json doc{{"format", "dps-clusters"},
                   {"num_clusters", model.num_clusters},
                   {"seed", model.seed},
                   {"num_layers", model.num_layers},
                   {"num_heads", model.num_heads},
                   {"centroids", model.centroids},
                   {"cluster_heads", std::move(heads)}};
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << doc.dump(1) << "\n";
}

ClusterModel load_cluster_model(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open cluster model '" + path.string() + "'");
    }
    ClusterModel model;
    try {
        const json doc = json::parse(in);
        if (doc.at("format").get<std::string>() != "dps-clusters") {
            fail(ErrorKind::schema, "cluster model: unexpected format tag");
        }
        model.num_clusters = doc.at("num_clusters").get<uint32_t>();
        model.seed         = doc.at("seed").get<uint64_t>();
        model.num_layers   = doc.at("num_layers").get<uint32_t>();
        model.num_heads    = doc.at("num_heads").get<uint32_t>();
        model.centroids    = doc.at("centroids").get<std::vector<Vector>>();
        for (const auto & c : doc.at("cluster_heads")) {
            WeightedHeadSet set;
            set.heads.k = c.at("k").get<size_t>();
            for (const auto & h : c.at("heads")) {
                set.heads.heads.push_back({h.at(0).get<uint32_t>(), h.at(1).get<uint32_t>()});
                set.importance.push_back(h.at(2).get<double>());
            }
            model.cluster_heads.push_back(std::move(set));
        }
        if (model.centroids.size() != model.num_clusters || model.cluster_heads.size() != model.num_clusters) {
            fail(ErrorKind::schema, "cluster model: centroid / head-set counts disagree with num_clusters");
        }
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("cluster model '") + path.string() + "': " + e.what());
    }
    return model;
}

} // namespace dps
