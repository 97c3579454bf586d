// Runs every acceptance check and prints one PASS/FAIL line per criterion.
// Exit status is nonzero when any criterion fails.

#include "oracle.hpp"

#include "dps/checkpoint_io.hpp"
#include "dps/decoder.hpp"
#include "dps/discovery.hpp"
#include "dps/error.hpp"
#include "dps/flops.hpp"
#include "dps/report.hpp"
#include "dps/routing.hpp"
#include "dps/tokenizer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace dps;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool        pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << std::fixed << v;
    return os.str();
}

std::string read_bytes(const fs::path & p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- 1 ----------------------------------------------------------------------

Outcome gamma_zero_identity() {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> users{"a", "b", "c"};
    ModelConfig config = fixtures::small_config(users.size(), 4, 4);
    config.max_seq_len = 64;
    const auto ck      = fixtures::random_model(config, users, 101);
    const size_t total = size_t{config.num_layers} * config.num_heads;

    Rng    rng(2024);
    size_t identical = 0, steps = 0;
    for (int trial = 0; trial < 100; ++trial) {
        TokenSequence ctx;
        ctx.ids.push_back(tokens::BOS);
        ctx.ids.push_back(tokens::USER_BASE + static_cast<TokenId>(rng.below(users.size())));
        const size_t len = 4 + rng.below(30);
        for (size_t i = 0; i < len; ++i) ctx.ids.push_back(static_cast<TokenId>(rng.below(256)));
        ctx.ids.push_back(tokens::SEP_TARGET);

        SuppressionMap s(config.num_layers, config.num_heads);
        for (size_t i = 0; i < total; ++i) {
            if (rng.uniform() < 0.4) s.set({uint32_t(i / config.num_heads), uint32_t(i % config.num_heads)}, float(rng.uniform()));
        }
        DecodeConfig dc;
        dc.gamma          = 0.0;
        dc.max_new_tokens = 12;
        dc.strategy       = trial % 3 == 0 ? Strategy::greedy : (trial % 3 == 1 ? Strategy::temperature : Strategy::top_k);
        dc.top_k          = 8;
        dc.temperature    = 0.5 + rng.uniform();
        dc.seed           = rng.next_u64();
        dc.mask_scope     = trial % 2 ? MaskScope::all_positions : MaskScope::decode_only;

        const auto a  = dps_decode(ck, ctx, s, dc);
        const auto b  = vanilla_decode(ck, ctx, dc);
        bool       ok = a.tokens == b.tokens && a.steps.size() == b.steps.size();
        for (size_t i = 0; ok && i < a.steps.size(); ++i) {
            ok = a.steps[i].combined.size() == b.steps[i].combined.size() &&
                 std::memcmp(a.steps[i].combined.data(), b.steps[i].combined.data(),
                             a.steps[i].combined.size() * sizeof(float)) == 0;
        }
        steps += a.steps.size();
        identical += ok ? 1 : 0;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {identical == 100 && secs < 60.0,
            std::to_string(identical) + "/100 triples bitwise identical over " + std::to_string(steps) +
                " steps in " + fmt(secs, 1) + " s"};
}

// ---- 2 ----------------------------------------------------------------------

Outcome ablation_oracle() {
    const auto                 ck = fixtures::micro_model();
    const Tokenizer            tok({"u0"});
    const std::vector<Example> data{{"u0", {"ab"}, "xy", "hello"}, {"u0", {"zz", "q"}, "k", "wor"}, {"u0", {}, "mn", "ld!"}};

    double worst_logit = 0;
    for (const Example & ex : data) {
        const auto seq = tok.encode_example(ex, ck.config().max_seq_len);
        for (int mask = 0; mask < 4; ++mask) {
            const std::vector<double> w{double(mask & 1), double((mask >> 1) & 1)};
            std::vector<HeadId>       heads;
            if (mask & 1) heads.push_back({0, 0});
            if (mask & 2) heads.push_back({0, 1});
            const Matrix lib = forward_logits(ck, seq, SuppressionMap::binary(ck.config(), heads));
            const auto   orc = oracle::forward(ck, seq.ids, w);
            for (size_t t = 0; t < lib.rows; ++t)
                for (size_t v = 0; v < lib.cols; ++v)
                    worst_logit = std::max(worst_logit, std::abs(double(lib.row(t)[v]) - orc[t][v]));
        }
    }

    const PcsTable pcs        = compute_pcs(ck, data);
    double         worst_pcs  = 0;
    for (uint32_t h = 0; h < 2; ++h) {
        double sum = 0;
        for (const Example & ex : data) {
            const auto          seq = tok.encode_example(ex, ck.config().max_seq_len);
            std::vector<double> w{0, 0};
            w[h] = 1;
            sum += oracle::target_nll(ck, seq, w) - oracle::target_nll(ck, seq);
        }
        worst_pcs = std::max(worst_pcs, std::abs(pcs.at(0, h) - sum / double(data.size())));
    }
    std::ostringstream os;
    os << "max |logit - oracle| = " << worst_logit << ", max |PCS - direct| = " << worst_pcs;
    return {worst_logit <= 1e-6 && worst_pcs <= 1e-6, os.str()};
}

// ---- 3-5 (benchmark run) ----------------------------------------------------

struct BenchRun {
    std::vector<ReportRow> rows;
    BenchReport            report;
    PcsTable               pcs;
};

const ReportRow * find_row(const BenchRun & run, const std::string & method, const std::string & routing,
                           double gamma) {
    for (const auto & r : run.rows) {
        if (r.method == method && r.routing == routing && r.gamma == gamma) return &r;
    }
    return nullptr;
}

Outcome causal_discovery(const BenchRun & run) {
    const auto & s      = run.report.summary;
    const double top    = s.at("causal.top_pcs.mean"), top_lo = s.at("causal.top_pcs.lower");
    const double rnd    = s.at("causal.random_heads.mean"), rnd_hi = s.at("causal.random_heads.upper");
    const double rnd_lo = s.at("causal.random_heads.lower");
    const bool   pass   = top > rnd && top_lo > rnd_hi;
    return {pass, "dNLL top-8 " + fmt(top) + " vs random-8 " + fmt(rnd) + " [" + fmt(rnd_lo) + ", " + fmt(rnd_hi) +
                      "] over 20 seeds"};
}

Outcome steering(const BenchRun & run) {
    const ReportRow * base = find_row(run, "dps", "global", 0.0);
    if (!base) return {false, "no gamma=0 row in report.csv"};
    std::string best_detail = "no gamma qualifies";
    bool        pass        = false;
    for (double g : {0.25, 0.5, 1.0, 2.0}) {
        const ReportRow * r = find_row(run, "dps", "global", g);
        if (!r || !r->improved_fraction) continue;
        const double nll_ratio = r->nll / base->nll;
        const bool   ok        = *r->improved_fraction >= 0.7 && nll_ratio <= 1.15;
        if (ok && !pass) {
            pass        = true;
            best_detail = "gamma " + fmt(g, 2) + ": " + fmt(100 * *r->improved_fraction, 1) +
                          "% of users improved, NLL " + fmt(base->nll) + " -> " + fmt(r->nll) + " (x" +
                          fmt(nll_ratio, 3) + ")";
        }
    }
    return {pass, best_detail};
}

Outcome head_structure(const BenchRun & run) {
    bool nesting = true;
    for (size_t k1 = 1; k1 <= 16; ++k1)
        for (size_t k2 = k1; k2 <= 16; ++k2)
            nesting = nesting && jaccard(select_heads(run.pcs, k1), select_heads(run.pcs, k2)) ==
                                     static_cast<double>(k1) / static_cast<double>(k2);

    const double within = run.report.summary.at("jaccard.within_cluster");
    const double cross  = run.report.summary.at("jaccard.cross_cluster");

    std::vector<std::pair<size_t, double>> sweep;
    for (const auto & r : run.rows)
        if (r.method == "k_sweep" && r.alignment) sweep.push_back({r.k, *r.alignment});
    std::sort(sweep.begin(), sweep.end());
    double best = -1, best_k = 0;
    for (auto [k, a] : sweep)
        if (a > best) best = a, best_k = double(k);
    size_t saturated_at = 0;
    for (auto [k, a] : sweep)
        if (a >= 0.95 * best) {
            saturated_at = k;
            break;
        }
    const size_t max_k    = sweep.empty() ? 0 : sweep.back().first;
    const bool   saturate = !sweep.empty() && saturated_at < max_k;

    return {nesting && within > cross && saturate,
            std::string("nesting ") + (nesting ? "exact" : "broken") + "; Jaccard within " + fmt(within, 3) +
                " vs cross " + fmt(cross, 3) + "; best K " + fmt(best_k, 0) + " (" + fmt(best) +
                "), within 5% from K=" + std::to_string(saturated_at)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome routing_limits() {
    Rng    rng(606);
    size_t agree = 0, unique = 0;
    for (int i = 0; i < 1000; ++i) {
        ClusterModel m;
        m.num_clusters = 3;
        for (int c = 0; c < 3; ++c) {
            Vector v(8);
            for (double & x : v) x = rng.normal();
            m.centroids.push_back(v);
        }
        m.cluster_heads.resize(3);
        Vector e(8);
        for (double & x : e) x = rng.normal();
        std::vector<double> d;
        for (const auto & c : m.centroids) d.push_back(squared_distance(e, c));
        auto sorted = d;
        std::sort(sorted.begin(), sorted.end());
        if (sorted[0] == sorted[1]) continue;
        ++unique;
        const auto hard = route(e, m, RoutingMode::hard);
        const auto soft = route(e, m, RoutingMode::soft, 1e-6);
        const auto pick = std::max_element(soft.weights.begin(), soft.weights.end()) - soft.weights.begin();
        agree += hard.weights[pick] == 1.0 ? 1 : 0;
    }

    const std::vector<std::string> users{"u0"};
    const auto                     ck = fixtures::random_model(fixtures::small_config(1, 3, 4), users, 66);
    PcsTable                       t;
    t.num_layers = 3;
    t.num_heads  = 4;
    for (int i = 0; i < 12; ++i) t.scores.push_back(std::sin(1.7 * i));
    const auto   weighted = weight_heads(t, select_heads(t, 4), HeadWeighting::normalized_pcs);
    ClusterModel one;
    one.num_clusters  = 1;
    one.centroids     = {Vector(6, 0.1)};
    one.cluster_heads = {weighted};
    one.num_layers    = 3;
    one.num_heads     = 4;
    const Tokenizer tok(users);
    size_t          equal = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        DecodeConfig dc;
        dc.strategy = seed % 2 ? Strategy::temperature : Strategy::greedy;
        dc.seed     = seed;
        const auto ctx = tok.encode_context({"u0", {"profile text"}, "in" + std::to_string(seed), ""}, 48, true, 12);
        const auto mode = seed % 2 ? RoutingMode::soft : RoutingMode::hard;
        const auto a    = dps_decode(ck, ctx, build_suppression(route(Vector(6, double(seed)), one, mode, 0.5), one), dc);
        const auto b    = dps_decode(ck, ctx, head_suppression(weighted, 3, 4), dc);
        equal += (a.tokens == b.tokens && a.steps == b.steps) ? 1 : 0;
    }
    return {agree == unique && equal == 10, std::to_string(agree) + "/" + std::to_string(unique) +
                                                " unique-nearest profiles agree; one-cluster DPS identical in " +
                                                std::to_string(equal) + "/10 decodes"};
}

// ---- 7 ----------------------------------------------------------------------

Outcome flops_pattern() {
    const uint64_t T     = 32;
    const auto     model = calibrate_flops(FlopsModel::llama3_8b_like(), 1024, T, 13.04);
    const double   base  = estimate_flops(model, 1024, T, 1).total;
    const uint64_t prompts[3]  = {512, 1024, 2048};
    const double   expected[3] = {1.06, 1.03, 1.02};
    bool           ok          = std::abs(base - 13.04) <= 0.05 * 13.04;
    double         dmin = 1e300, dmax = 0;
    std::string    ratios;
    for (int i = 0; i < 3; ++i) {
        const double one   = estimate_flops(model, prompts[i], T, 1).total;
        const double two   = estimate_flops(model, prompts[i], T, 2).total;
        const double ratio = two / one;
        ok                 = ok && std::abs(ratio - expected[i]) <= 0.02;
        dmin               = std::min(dmin, two - one);
        dmax               = std::max(dmax, two - one);
        ratios += (i ? "/" : "") + fmt(ratio, 3);
    }
    const double spread = dmax / dmin - 1.0;
    ok                  = ok && spread <= 0.10;
    std::ostringstream os;
    os.precision(3);
    os << "N_eff " << model.num_params_effective << ", base " << fmt(base, 2) << " TF, ratios " << ratios
       << ", second-pass delta " << fmt(dmin, 3) << ".." << fmt(dmax, 3) << " TF (spread " << fmt(100 * spread, 1)
       << "%)";
    return {ok, os.str()};
}

// ---- 8 ----------------------------------------------------------------------

Outcome kmeans_correctness() {
    size_t monotone = 0;
    for (uint64_t inst = 0; inst < 50; ++inst) {
        Rng                 rng(5000 + inst);
        std::vector<Vector> pts(40 + inst, Vector(2 + inst % 5));
        for (auto & p : pts)
            for (double & x : p) x = rng.normal() * (1 + inst % 3);
        const auto r  = kmeans(pts, 2 + inst % 6, inst);
        bool       ok = !r.objective.empty();
        for (size_t i = 1; i < r.objective.size(); ++i) ok = ok && r.objective[i] <= r.objective[i - 1];
        monotone += ok ? 1 : 0;
    }
    size_t recovered = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng                 rng(900 + seed);
        const double        spread = 1.0, sep = 10.0;
        const Vector        centers[3] = {{0, 0, 0}, {sep, 0, 0}, {0, sep, 0}};
        std::vector<Vector> pts;
        std::vector<size_t> truth;
        for (size_t c = 0; c < 3; ++c)
            for (int i = 0; i < 30; ++i) {
                Vector p = centers[c];
                for (double & x : p) x += spread * rng.normal();
                pts.push_back(p);
                truth.push_back(c);
            }
        const auto        r = kmeans(pts, 3, seed);
        std::vector<long> map(3, -1);
        bool              ok = true;
        for (size_t i = 0; i < pts.size(); ++i) {
            if (map[truth[i]] < 0) map[truth[i]] = long(r.assignment[i]);
            ok = ok && map[truth[i]] == long(r.assignment[i]);
        }
        ok = ok && map[0] != map[1] && map[1] != map[2] && map[0] != map[2];
        recovered += ok ? 1 : 0;
    }
    return {monotone == 50 && recovered == 20, "objective non-increasing on " + std::to_string(monotone) +
                                                    "/50 instances; blobs recovered on " +
                                                    std::to_string(recovered) + "/20 seeds"};
}

// ---- 9 ----------------------------------------------------------------------

Outcome determinism(const fs::path & a, const fs::path & b) {
    size_t files = 0, same = 0;
    std::string first_diff;
    for (const auto & entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const auto rel   = fs::relative(entry.path(), a);
        const bool equal = fs::exists(b / rel) && read_bytes(entry.path()) == read_bytes(b / rel);
        same += equal ? 1 : 0;
        if (!equal && first_diff.empty()) first_diff = rel.string();
    }
    size_t other = 0;
    for (const auto & entry : fs::recursive_directory_iterator(b)) other += entry.is_regular_file() ? 1 : 0;

    const auto  ck    = load_checkpoint(a / "model.dpsm");
    const auto  bytes = serialize_checkpoint(ck);
    const bool  trip  = bytes == read_bytes(a / "model.dpsm") && deserialize_checkpoint(bytes) == ck;

    auto kind_of = [](const std::string & corrupted) -> std::string {
        try {
            deserialize_checkpoint(corrupted);
            return "accepted";
        } catch (const Error & e) {
            return std::string(to_string(e.kind()));
        }
    };
    std::string bad_magic = bytes, bad_version = bytes, bad_shape = bytes;
    bad_magic[0]   = 'Q';
    bad_version[4] = 7;
    uint32_t header_len;
    std::memcpy(&header_len, bytes.data() + 8, 4);
    std::string header = bytes.substr(12, header_len);
    const auto  pos    = header.find("\"tok_emb\"");
    const auto  open   = header.find('[', pos);
    header.replace(open + 1, 1, "9");
    bad_shape.replace(12, header_len, header);
    const std::string k1 = kind_of(bad_magic), k2 = kind_of(bad_version), k3 = kind_of(bytes.substr(0, bytes.size() / 2)),
                      k4 = kind_of(bad_shape);
    const bool categorized = k1 == "magic" && k2 == "version" && k3 == "truncated" && k4 == "shape";

    std::string detail = std::to_string(same) + "/" + std::to_string(files) + " artifacts byte-identical";
    if (!first_diff.empty()) detail += " (first difference: " + first_diff + ")";
    detail += "; round trip " + std::string(trip ? "bit-exact" : "differs") + "; corruption -> " + k1 + "/" + k2 +
              "/" + k3 + "/" + k4;
    return {files > 0 && same == files && other == files && trip && categorized, detail};
}

bool run_cli_bench(const std::string & cli, uint64_t seed, const fs::path & out, size_t threads) {
    fs::remove_all(out);
    const std::string cmd = "\"" + cli + "\" bench --quiet --seed " + std::to_string(seed) + " --threads " +
                            std::to_string(threads) + " --out \"" + out.string() + "\"";
    return std::system(cmd.c_str()) == 0;
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App    app{"Acceptance checks"};
    std::string cli  = DPS_CLI_PATH;
    std::string work = (fs::temp_directory_path() / "dps_acceptance").string();
    uint64_t    seed = 7;
    size_t      threads = 1;
    app.add_option("--dps", cli, "Path to the dps executable")->capture_default_str();
    app.add_option("--work", work, "Scratch directory")->capture_default_str();
    app.add_option("--seed", seed, "Benchmark seed")->capture_default_str();
    app.add_option("--threads", threads, "Benchmark worker threads")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    set_warning_sink([](std::string_view) {});
    std::vector<std::pair<std::string, Outcome>> results;
    auto record = [&](const std::string & name, auto && fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception & e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const size_t n = results.size() + 1;
        std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << n << " " << name << ": " << o.detail << std::endl;
        results.emplace_back(name, o);
    };

    record("gamma-zero identity", gamma_zero_identity);
    record("ablation oracle", ablation_oracle);

    const fs::path run_a = fs::path(work) / "run_a", run_b = fs::path(work) / "run_b";
    const bool     ran_a = run_cli_bench(cli, seed, run_a, threads);
    BenchRun       run;
    if (ran_a) {
        run.rows   = read_report_csv(run_a / "report.csv");
        run.report = load_report_json(run_a / "report.json");
        run.pcs    = load_pcs(run_a / "pcs.json");
    }
    auto needs_run = [&](auto fn) {
        return [&, fn]() -> Outcome {
            if (!ran_a) return {false, "dps bench failed"};
            return fn(run);
        };
    };
    record("causal discovery", needs_run(causal_discovery));
    record("steering", needs_run(steering));
    record("head-set structure", needs_run(head_structure));
    record("routing limits", routing_limits);
    record("efficiency pattern", flops_pattern);
    record("k-means correctness", kmeans_correctness);
    record("determinism and formats", [&]() -> Outcome {
        if (!ran_a || !run_cli_bench(cli, seed, run_b, threads)) return {false, "dps bench failed"};
        return determinism(run_a, run_b);
    });

    size_t passed = 0;
    for (const auto & [name, o] : results) passed += o.pass ? 1 : 0;
    std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
    return passed == results.size() ? 0 : 1;
}
