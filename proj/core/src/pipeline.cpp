#include "dps/pipeline.hpp"

#include "dps/checkpoint_io.hpp"
#include "dps/error.hpp"
#include "dps/rng.hpp"
#include "dps/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace dps {

using nlohmann::json;

ModelConfig model_config_for(const ModelShape & shape, size_t num_users, uint64_t seed) {
    ModelConfig c;
    c.num_layers  = shape.num_layers;
    c.num_heads   = shape.num_heads;
    c.d_head      = shape.d_head;
    c.d_model     = shape.num_heads * shape.d_head;
    c.d_ff        = shape.d_ff;
    c.max_seq_len = shape.max_seq_len;
    c.vocab_size  = vocab_size_for_users(num_users);
    c.seed        = seed;
    c.validate();
    return c;
}

void BenchConfig::validate() const {
    if (threads < 1) {
        fail(ErrorKind::config, "threads must be >= 1");
    }
    const ModelConfig mc    = model_config_for(model, 1, 0);
    const size_t      total = mc.total_heads();
    train.validate();
    if (gammas.empty() || std::find(gammas.begin(), gammas.end(), 0.0) == gammas.end()) {
        fail(ErrorKind::config, "gammas must include 0");
    }
    for (double g : gammas) {
        if (!(g >= 0.0)) {
            fail(ErrorKind::config, "gammas must be >= 0");
        }
    }
    if (k_values.empty()) {
        fail(ErrorKind::config, "k_values must not be empty");
    }
    for (size_t k : k_values) {
        if (k < 1 || k > total) {
            fail(ErrorKind::config, "k_values entries must be in [1, " + std::to_string(total) + "]");
        }
    }
    if (topk > total) {
        fail(ErrorKind::config, "topk exceeds the " + std::to_string(total) + " heads of the model");
    }
    if (!(k_sweep_gamma >= 0.0)) {
        fail(ErrorKind::config, "k_sweep_gamma must be >= 0");
    }
    if (num_clusters < 1 || num_clusters > size_t{synth.num_clusters} * synth.users_per_cluster) {
        fail(ErrorKind::config, "num_clusters must be between 1 and the number of users");
    }
    if (!(soft_temperature > 0.0)) {
        fail(ErrorKind::config, "soft_temperature must be > 0");
    }
    if (control_seeds < 5) {
        fail(ErrorKind::config, "control_seeds must be >= 5");
    }
    if (causal_examples_per_user < 1 || generate_tokens < 1 || !(generate_temperature > 0.0)) {
        fail(ErrorKind::config, "causal/generation settings must be positive");
    }
    if (synth.eval_per_user < 1 || synth.discover_per_user < 1) {
        fail(ErrorKind::config, "discover and eval splits must be non-empty");
    }
}

// ---- config JSON -------------------------------------------------------------

std::string config_json(const BenchConfig & c) {
    const SynthParams & s = c.synth;
    const json          doc{
        {"seed", c.seed},
        {"threads", c.threads},
        {"synth",
                  {{"num_clusters", s.num_clusters},
                   {"users_per_cluster", s.users_per_cluster},
                   {"block_size", s.block_size},
                   {"preference_strength", s.preference_strength},
                   {"strength_jitter", s.strength_jitter},
                   {"markers_per_user", s.markers_per_user},
                   {"marker_rate", s.marker_rate},
                   {"profile_snippets", s.lengths.profile_snippets},
                   {"snippet_len", s.lengths.snippet_len},
                   {"input_len", s.lengths.input_len},
                   {"target_len", s.lengths.target_len},
                   {"train_per_user", s.train_per_user},
                   {"discover_per_user", s.discover_per_user},
                   {"eval_per_user", s.eval_per_user}}},
        {"model",
                  {{"num_layers", c.model.num_layers},
                   {"num_heads", c.model.num_heads},
                   {"d_head", c.model.d_head},
                   {"d_ff", c.model.d_ff},
                   {"max_seq_len", c.model.max_seq_len}}},
        {"train",
                  {{"steps", c.train.steps},
                   {"batch_size", c.train.batch_size},
                   {"learning_rate", c.train.learning_rate},
                   {"warmup_steps", c.train.warmup_steps},
                   {"min_lr_ratio", c.train.min_lr_ratio},
                   {"beta1", c.train.beta1},
                   {"beta2", c.train.beta2},
                   {"adam_eps", c.train.adam_eps},
                   {"grad_clip", c.train.grad_clip}}},
        {"topk", c.topk},
        {"gammas", c.gammas},
        {"k_values", c.k_values},
        {"k_sweep_gamma", c.k_sweep_gamma},
        {"num_clusters", c.num_clusters},
        {"soft_temperature", c.soft_temperature},
        {"control_seeds", c.control_seeds},
        {"causal_examples_per_user", c.causal_examples_per_user},
        {"generate_per_user", c.generate_per_user},
        {"generate_tokens", c.generate_tokens},
        {"generate_temperature", c.generate_temperature}};
    return doc.dump(2) + "\n";
}

namespace {

// Reads known keys from an object and rejects anything else.
class StrictObject {
public:
    StrictObject(const json & j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) {
            fail(ErrorKind::schema, where_ + " must be a JSON object");
        }
    }

    template <typename T> void get(const char * key, T & out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception &) {
            fail(ErrorKind::schema, where_ + "." + key + " has the wrong type");
        }
    }

    const json * sub(const char * key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto & [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                fail(ErrorKind::schema, "unknown config key '" + where_ + "." + key + "'");
            }
        }
    }

private:
    const json &          j_;
    std::string           where_;
    std::set<std::string> seen_;
};

} // namespace

BenchConfig bench_config_from_json(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("config is not valid JSON: ") + e.what());
    }
    BenchConfig  c;
    StrictObject root(doc, "config");
    root.get("seed", c.seed);
    root.get("threads", c.threads);
    if (const json * j = root.sub("synth")) {
        SynthParams & s = c.synth;
        StrictObject  o(*j, "synth");
        o.get("num_clusters", s.num_clusters);
        o.get("users_per_cluster", s.users_per_cluster);
        o.get("block_size", s.block_size);
        o.get("preference_strength", s.preference_strength);
        o.get("strength_jitter", s.strength_jitter);
        o.get("markers_per_user", s.markers_per_user);
        o.get("marker_rate", s.marker_rate);
        o.get("profile_snippets", s.lengths.profile_snippets);
        o.get("snippet_len", s.lengths.snippet_len);
        o.get("input_len", s.lengths.input_len);
        o.get("target_len", s.lengths.target_len);
        o.get("train_per_user", s.train_per_user);
        o.get("discover_per_user", s.discover_per_user);
        o.get("eval_per_user", s.eval_per_user);
        o.finish();
    }
    if (const json * j = root.sub("model")) {
        StrictObject o(*j, "model");
        o.get("num_layers", c.model.num_layers);
        o.get("num_heads", c.model.num_heads);
        o.get("d_head", c.model.d_head);
        o.get("d_ff", c.model.d_ff);
        o.get("max_seq_len", c.model.max_seq_len);
        o.finish();
    }
    if (const json * j = root.sub("train")) {
        StrictObject o(*j, "train");
        o.get("steps", c.train.steps);
        o.get("batch_size", c.train.batch_size);
        o.get("learning_rate", c.train.learning_rate);
        o.get("warmup_steps", c.train.warmup_steps);
        o.get("min_lr_ratio", c.train.min_lr_ratio);
        o.get("beta1", c.train.beta1);
        o.get("beta2", c.train.beta2);
        o.get("adam_eps", c.train.adam_eps);
        o.get("grad_clip", c.train.grad_clip);
        o.finish();
    }
    root.get("topk", c.topk);
    root.get("gammas", c.gammas);
    root.get("k_values", c.k_values);
    root.get("k_sweep_gamma", c.k_sweep_gamma);
    root.get("num_clusters", c.num_clusters);
    root.get("soft_temperature", c.soft_temperature);
    root.get("control_seeds", c.control_seeds);
    root.get("causal_examples_per_user", c.causal_examples_per_user);
    root.get("generate_per_user", c.generate_per_user);
    root.get("generate_tokens", c.generate_tokens);
    root.get("generate_temperature", c.generate_temperature);
    root.finish();
    return c;
}

BenchConfig load_bench_config(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open config '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return bench_config_from_json(ss.str());
}

// ---- stages ------------------------------------------------------------------

ModelCheckpoint train_on_benchmark(const Benchmark & bench, const ModelShape & shape, TrainConfig hyper,
                                   uint64_t seed, size_t threads) {
    const std::vector<std::string> users = bench.user_ids();
    const ModelConfig              mc    = model_config_for(shape, users.size(), derive_seed(seed, "model.init"));
    hyper.seed                           = derive_seed(seed, "train");
    hyper.threads                        = threads;
    return train(mc, bench.train.examples, users, hyper);
}

std::vector<UserProfile> user_profiles(const Benchmark & bench, Split split) {
    std::vector<UserProfile>      out;
    std::map<std::string, size_t> index;
    std::vector<std::set<std::string>> seen;
    for (const std::string & id : bench.user_ids()) {
        index[id] = out.size();
        out.push_back({id, {}, {}});
        seen.emplace_back();
    }
    for (const Example & ex : bench.split(split).examples) {
        const size_t u = index.at(ex.user_id);
        for (const std::string & text : ex.profile_texts) {
            if (seen[u].insert(text).second) {
                out[u].profile_texts.push_back(text);
            }
        }
    }
    return out;
}

ClusterFit fit_clusters(const ModelCheckpoint & checkpoint, std::vector<UserProfile> profiles,
                        std::span<const Example> examples, std::span<const PcsTable> tables, size_t k,
                        uint32_t num_clusters, uint64_t seed, HeadWeighting weighting) {
    if (examples.size() != tables.size()) {
        fail(ErrorKind::input, "fit_clusters: one PCS table per example is required");
    }
    ClusterFit          fit;
    std::vector<Vector> points;
    for (UserProfile & p : profiles) {
        p.embedding = embed_profile(checkpoint, p);
        points.push_back(p.embedding);
    }
    fit.kmeans     = kmeans(points, num_clusters, seed);
    fit.assignment = fit.kmeans.assignment;

    std::map<std::string, size_t> cluster_of;
    for (size_t i = 0; i < profiles.size(); ++i) {
        cluster_of[profiles[i].user_id] = fit.assignment[i];
    }
    std::vector<std::vector<size_t>> members(num_clusters);
    for (size_t i = 0; i < examples.size(); ++i) {
        const auto it = cluster_of.find(examples[i].user_id);
        if (it != cluster_of.end()) {
            members[it->second].push_back(i);
        }
    }
    for (uint32_t c = 0; c < num_clusters; ++c) {
        if (members[c].empty()) {
            fail(ErrorKind::input, "fit_clusters: cluster " + std::to_string(c) + " has no discovery examples");
        }
        fit.tables.push_back(average_pcs(tables, members[c]));
    }
    const ModelConfig & mc  = checkpoint.config();
    fit.model.centroids     = fit.kmeans.centroids;
    fit.model.cluster_heads = cluster_heads_from_tables(fit.tables, k, weighting);
    fit.model.num_clusters  = num_clusters;
    fit.model.seed          = seed;
    fit.model.num_layers    = mc.num_layers;
    fit.model.num_heads     = mc.num_heads;
    fit.profiles            = std::move(profiles);
    return fit;
}

std::map<std::string, SuppressionMap> routed_suppression(const ClusterFit & fit, RoutingMode mode,
                                                         double temperature) {
    std::map<std::string, SuppressionMap> out;
    for (const UserProfile & p : fit.profiles) {
        out.emplace(p.user_id, build_suppression(route(p.embedding, fit.model, mode, temperature), fit.model));
    }
    return out;
}

// ---- benchmark ----------------------------------------------------------------

namespace {

ReportRow to_report_row(const SweepRow & row, const SweepRow * vanilla) {
    std::vector<double> n, a;
    for (const UserMetrics & u : row.users) {
        n.push_back(u.nll);
        a.push_back(u.alignment);
    }
    const Interval ni = t_interval(n);
    const Interval ai = t_interval(a);
    ReportRow      r;
    r.method          = row.method;
    r.gamma           = row.gamma;
    r.k               = row.k;
    r.routing         = row.routing;
    r.nll             = row.mean_nll;
    r.nll_lower       = ni.lower;
    r.nll_upper       = ni.upper;
    r.alignment       = row.mean_alignment;
    r.alignment_lower = ai.lower;
    r.alignment_upper = ai.upper;
    if (vanilla) {
        r.improved_fraction = improved_fraction(*vanilla, row);
    }
    return r;
}

std::vector<std::string> index_labels(const std::string & prefix, size_t n) {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) {
        out.push_back(prefix + std::to_string(i));
    }
    return out;
}

Heatmap pcs_heatmap(const std::string & name, const PcsTable & pcs) {
    Heatmap h{name, index_labels("layer_", pcs.num_layers), index_labels("head_", pcs.num_heads), {}};
    for (uint32_t l = 0; l < pcs.num_layers; ++l) {
        std::vector<double> row;
        for (uint32_t k = 0; k < pcs.num_heads; ++k) {
            row.push_back(pcs.at(l, k));
        }
        h.values.push_back(std::move(row));
    }
    return h;
}

// Mean pairwise overlap over user pairs, split by ground-truth cluster.
std::pair<double, double> within_cross(const std::vector<std::vector<double>> & jac,
                                       const std::vector<uint32_t> & cluster) {
    double within = 0.0, cross = 0.0;
    size_t nw = 0, nc = 0;
    for (size_t i = 0; i < jac.size(); ++i) {
        for (size_t j = i + 1; j < jac.size(); ++j) {
            if (cluster[i] == cluster[j]) {
                within += jac[i][j];
                ++nw;
            } else {
                cross += jac[i][j];
                ++nc;
            }
        }
    }
    return {nw ? within / static_cast<double>(nw) : 0.0, nc ? cross / static_cast<double>(nc) : 0.0};
}

std::string compiler_id() {
#if defined(__clang__)
    return "clang " __clang_version__;
#elif defined(__GNUC__)
    return "gcc " __VERSION__;
#else
    return "unknown";
#endif
}

} // namespace

BenchArtifacts run_bench(const BenchConfig & config, const ProgressFn & progress) {
    config.validate();
    auto say = [&](const std::string & stage) {
        if (progress) {
            progress(stage);
        }
    };
    BenchArtifacts a;
    a.config              = config;
    const uint64_t seed   = config.seed;
    const size_t   thr    = config.threads;
    BenchReport &  report = a.report;

    say("synth");
    a.benchmark                          = generate_benchmark(config.synth, derive_seed(seed, "synth"));
    const Benchmark &              bench = a.benchmark;
    const std::vector<std::string> users = bench.user_ids();

    say("train");
    {
        TrainConfig        hyper = config.train;
        std::deque<double> recent;
        hyper.on_step = [&](size_t, double loss) {
            recent.push_back(loss);
            if (recent.size() > 20) {
                recent.pop_front();
            }
        };
        a.checkpoint       = train_on_benchmark(bench, config.model, hyper, seed, thr);
        a.final_train_loss = recent.empty() ? 0.0
                                            : std::accumulate(recent.begin(), recent.end(), 0.0) /
                                                  static_cast<double>(recent.size());
    }
    const ModelCheckpoint & ckpt = a.checkpoint;
    const ModelConfig &     mc   = ckpt.config();

    say("discover");
    const auto & disc   = bench.discover.examples;
    const auto   tables = per_example_pcs(ckpt, disc, thr);
    a.pcs               = average_pcs(tables);
    a.heads             = select_heads(a.pcs, config.topk);
    const SuppressionMap global_map = SuppressionMap::binary(mc, a.heads.heads);

    std::vector<PcsTable> user_tables;
    std::vector<HeadSet>  user_sets;
    std::vector<uint32_t> true_cluster;
    for (const std::string & id : users) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < disc.size(); ++i) {
            if (disc[i].user_id == id) {
                idx.push_back(i);
            }
        }
        user_tables.push_back(average_pcs(tables, idx));
        user_sets.push_back(select_heads(user_tables.back(), config.topk));
        true_cluster.push_back(bench.users.at(id).cluster_id);
    }

    say("cluster");
    a.clusters = fit_clusters(ckpt, user_profiles(bench, Split::discover), disc, tables, config.topk,
                              config.num_clusters, derive_seed(seed, "kmeans"));
    const auto hard_maps = routed_suppression(a.clusters, RoutingMode::hard, 1.0);
    const auto soft_maps = routed_suppression(a.clusters, RoutingMode::soft, config.soft_temperature);
    const SuppressionMap random_map = random_head_mask(mc.num_layers, mc.num_heads, config.topk,
                                                       derive_seed(seed, "control.steering"));

    say("steering");
    const SteeringEvaluator evaluator(ckpt, bench.eval.examples, bench.users, thr);
    const SweepRow          vanilla = evaluator.vanilla();
    auto fixed = [](const SuppressionMap & m) {
        return [&m](const std::string &) -> const SuppressionMap & { return m; };
    };
    auto lookup = [](const std::map<std::string, SuppressionMap> & maps) {
        return [&maps](const std::string & id) -> const SuppressionMap & { return maps.at(id); };
    };
    const auto global_rows = evaluator.dps(fixed(global_map), config.gammas, "dps", config.topk, "global");
    const auto hard_rows   = evaluator.dps(lookup(hard_maps), config.gammas, "dps", config.topk, "hard");
    const auto soft_rows   = evaluator.dps(lookup(soft_maps), config.gammas, "dps", config.topk, "soft");
    const auto random_rows =
        evaluator.dps(fixed(random_map), config.gammas, "dps_random_heads", config.topk, "global");
    const auto cad_rows = evaluator.context_contrast(config.gammas);
    const auto k_rows   = evaluator.k_sweep(a.pcs, config.k_values, config.k_sweep_gamma);

    say("generation");
    DecodeConfig gen;
    gen.temperature    = config.generate_temperature;
    gen.max_new_tokens = config.generate_tokens;
    const std::set<double>    gamma_set(config.gammas.begin(), config.gammas.end());
    const std::vector<double> uniq(gamma_set.begin(), gamma_set.end());
    auto mean_generated = [&](const DecodeConfig & dc) {
        const auto per_user = generation_alignment(ckpt, bench.eval.examples, bench.users, fixed(global_map), dc,
                                                   config.generate_per_user, thr);
        double total = 0.0;
        for (const UserMetrics & u : per_user) {
            total += u.alignment;
        }
        return per_user.empty() ? 0.0 : total / static_cast<double>(per_user.size());
    };
    std::vector<double> sampled, greedy;
    for (double g : uniq) {
        gen.gamma    = g;
        gen.seed     = derive_seed(seed, "generation");
        gen.strategy = Strategy::temperature;
        sampled.push_back(mean_generated(gen));
        gen.strategy = Strategy::greedy;
        greedy.push_back(mean_generated(gen));
    }
    {
        DecodeConfig tc;
        tc.gamma          = 1.0;
        tc.max_new_tokens = config.generate_tokens;
        const Example & ex = bench.eval.examples.front();
        const Tokenizer tok = Tokenizer::for_checkpoint(ckpt);
        a.trace = dps_decode(ckpt, tok.encode_context(ex, mc.max_seq_len, true, tc.max_new_tokens), global_map, tc);
    }

    say("causal");
    std::vector<Example> causal_set;
    {
        std::map<std::string, size_t> taken;
        for (const Example & ex : bench.eval.examples) {
            if (taken[ex.user_id]++ < config.causal_examples_per_user) {
                causal_set.push_back(ex);
            }
        }
    }
    std::vector<uint64_t> control_seeds;
    for (size_t i = 0; i < config.control_seeds; ++i) {
        control_seeds.push_back(derive_seed(seed, "control.causal", i));
    }
    const CausalValidation causal = causal_validation(ckpt, causal_set, a.pcs, config.topk, control_seeds, thr);

    // ---- rows
    report.rows.push_back(to_report_row(vanilla, &vanilla));
    auto add_rows = [&](const std::vector<SweepRow> & rows, bool with_sampled) {
        for (const SweepRow & r : rows) {
            ReportRow rr = to_report_row(r, &vanilla);
            if (with_sampled) {
                const size_t gi     = static_cast<size_t>(std::find(uniq.begin(), uniq.end(), r.gamma) - uniq.begin());
                rr.sampled_alignment = sampled[gi];
                rr.greedy_alignment  = greedy[gi];
            }
            report.rows.push_back(std::move(rr));
        }
    };
    add_rows(global_rows, true);
    add_rows(hard_rows, false);
    add_rows(soft_rows, false);
    add_rows(random_rows, false);
    add_rows(cad_rows, false);
    for (const SweepRow & r : k_rows) {
        ReportRow rr = to_report_row(r, &vanilla);
        rr.method    = "k_sweep";
        report.rows.push_back(std::move(rr));
    }
    for (const CausalCondition & c : causal.conditions) {
        ReportRow rr;
        rr.method      = "ablation_" + c.name;
        rr.k           = causal.k;
        rr.routing     = "none";
        rr.seeds       = c.deltas.size();
        rr.nll         = causal.base_nll + c.interval.mean;
        rr.nll_lower   = causal.base_nll + c.interval.lower;
        rr.nll_upper   = causal.base_nll + c.interval.upper;
        rr.delta_nll   = c.interval.mean;
        rr.delta_lower = c.interval.lower;
        rr.delta_upper = c.interval.upper;
        report.rows.push_back(std::move(rr));
    }

    // ---- summary
    auto & sm               = report.summary;
    sm["train.final_loss"]  = a.final_train_loss;
    sm["causal.base_nll"]   = causal.base_nll;
    for (const CausalCondition & c : causal.conditions) {
        sm["causal." + c.name + ".mean"]  = c.interval.mean;
        sm["causal." + c.name + ".lower"] = c.interval.lower;
        sm["causal." + c.name + ".upper"] = c.interval.upper;
    }
    const Interval & top_i    = causal.condition("top_pcs").interval;
    const Interval & rand_i   = causal.condition("random_heads").interval;
    sm["causal.separated"]    = (top_i.mean > rand_i.mean && !overlaps(top_i, rand_i)) ? 1.0 : 0.0;

    const auto user_jac                   = overlap_matrix(user_sets);
    const auto [within, cross]            = within_cross(user_jac, true_cluster);
    sm["jaccard.within_cluster"]          = within;
    sm["jaccard.cross_cluster"]           = cross;

    const size_t        top_share = std::max<size_t>(1, (mc.total_heads() + 9) / 10);
    const SparsityStats sparsity  = pcs_sparsity_stats(a.pcs, top_share);
    sm["sparsity.k"]                 = static_cast<double>(sparsity.k);
    sm["sparsity.top_k_mass"]        = sparsity.top_k_mass;
    sm["sparsity.random_subset_mass"] = random_subset_mass(a.pcs, top_share, derive_seed(seed, "sparsity"));
    sm["sparsity.excess_kurtosis"]   = sparsity.excess_kurtosis;
    sm["sparsity.positive_fraction"] = sparsity.positive_fraction;
    sm["sparsity.degenerate"]        = sparsity.degenerate ? 1.0 : 0.0;

    {
        // Share of users whose k-means cluster holds the majority of their true cluster.
        std::map<std::pair<uint32_t, size_t>, size_t> counts;
        for (size_t i = 0; i < users.size(); ++i) {
            ++counts[{true_cluster[i], a.clusters.assignment[i]}];
        }
        std::map<uint32_t, size_t> best;
        for (const auto & [key, n] : counts) {
            best[key.first] = std::max(best[key.first], n);
        }
        size_t agree = 0;
        for (const auto & [c, n] : best) {
            agree += n;
        }
        sm["clusters.purity"] = static_cast<double>(agree) / static_cast<double>(users.size());
    }

    // ---- heatmaps
    report.heatmaps.push_back(pcs_heatmap("pcs_global", a.pcs));
    for (size_t c = 0; c < a.clusters.tables.size(); ++c) {
        report.heatmaps.push_back(pcs_heatmap("pcs_cluster_" + std::to_string(c), a.clusters.tables[c]));
    }
    {
        Heatmap h{"pcs_users", users, {}, {}};
        for (uint32_t l = 0; l < mc.num_layers; ++l) {
            for (uint32_t k = 0; k < mc.num_heads; ++k) {
                h.col_labels.push_back("L" + std::to_string(l) + "H" + std::to_string(k));
            }
        }
        for (const PcsTable & t : user_tables) {
            h.values.push_back(t.scores);
        }
        report.heatmaps.push_back(std::move(h));
    }
    report.heatmaps.push_back({"jaccard_users", users, users, user_jac});
    {
        std::vector<HeadSet> sets;
        for (const WeightedHeadSet & w : a.clusters.model.cluster_heads) {
            sets.push_back(w.heads);
        }
        const auto labels = index_labels("cluster_", sets.size());
        report.heatmaps.push_back({"jaccard_clusters", labels, labels, overlap_matrix(sets)});
    }
    {
        std::vector<std::string> labels;
        for (size_t k : config.k_values) {
            labels.push_back("k" + std::to_string(k));
        }
        report.heatmaps.push_back({"k_stability", labels, labels, k_sweep_stability(a.pcs, config.k_values)});
    }
    {
        Heatmap h{"routing_soft", users, index_labels("cluster_", a.clusters.model.num_clusters), {}};
        for (const UserProfile & p : a.clusters.profiles) {
            h.values.push_back(route(p.embedding, a.clusters.model, RoutingMode::soft, config.soft_temperature).weights);
        }
        report.heatmaps.push_back(std::move(h));
    }

    report.environment = {{"library", "dps 0.1.0"},
                          {"compiler", compiler_id()},
                          {"cxx_standard", std::to_string(__cplusplus)},
                          {"model_fingerprint", fingerprint_hex(ckpt.fingerprint())}};
    say("done");
    return a;
}

void write_bench_dir(const BenchArtifacts & a, const std::filesystem::path & dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(ErrorKind::io, "cannot create '" + dir.string() + "': " + ec.message());
    }
    {
        std::ofstream out(dir / "config.json", std::ios::binary);
        if (!out) {
            fail(ErrorKind::io, "cannot write '" + (dir / "config.json").string() + "'");
        }
        out << config_json(a.config);
    }
    save_benchmark(a.benchmark, dir / "benchmark.json");
    save_checkpoint(a.checkpoint, dir / "model.dpsm");
    save_pcs(a.pcs, dir / "pcs.json");
    save_head_set(a.heads, dir / "heads.json");
    save_cluster_model(a.clusters.model, dir / "clusters.json");
    write_trace_jsonl(a.trace, dir / "trace.jsonl");
    emit_report(a.report, dir);
}

} // namespace dps
