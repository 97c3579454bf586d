#include "dps/metrics.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"
#include "dps/tokenizer.hpp"
#include "dps/transformer.hpp"
#include "parallel.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace dps {

Interval t_interval(std::span<const double> samples, double confidence) {
    if (samples.empty()) {
        fail(ErrorKind::input, "t_interval: no samples");
    }
    if (!(confidence > 0.0 && confidence < 1.0)) {
        fail(ErrorKind::input, "t_interval: confidence must be in (0, 1)");
    }
    Interval out;
    out.n    = samples.size();
    out.mean = exact_sum(samples) / static_cast<double>(out.n);
    if (out.n == 1) {
        out.lower = out.upper = out.mean;
        return out;
    }
    std::vector<double> sq;
    sq.reserve(out.n);
    for (double x : samples) {
        sq.push_back((x - out.mean) * (x - out.mean));
    }
    const double sd = std::sqrt(exact_sum(sq) / static_cast<double>(out.n - 1));
    const boost::math::students_t dist(static_cast<double>(out.n - 1));
    const double half = boost::math::quantile(dist, 0.5 + confidence / 2.0) * sd / std::sqrt(static_cast<double>(out.n));
    out.lower = out.mean - half;
    out.upper = out.mean + half;
    return out;
}

bool overlaps(const Interval & a, const Interval & b) {
    return a.lower <= b.upper && b.lower <= a.upper;
}

const CausalCondition & CausalValidation::condition(std::string_view name) const {
    for (const CausalCondition & c : conditions) {
        if (c.name == name) {
            return c;
        }
    }
    fail(ErrorKind::input, "causal validation has no condition '" + std::string(name) + "'");
}

namespace {

std::vector<TokenSequence> encode_all(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                                      bool with_profile = true) {
    const Tokenizer            tok = Tokenizer::for_checkpoint(checkpoint);
    std::vector<TokenSequence> out;
    out.reserve(dataset.size());
    for (const Example & ex : dataset) {
        out.push_back(tok.encode_example(ex, checkpoint.config().max_seq_len, with_profile));
    }
    return out;
}

std::vector<double> example_nlls(const Transformer & model, std::span<const TokenSequence> seqs,
                                 const SuppressionMap & suppression, size_t threads) {
    std::vector<double> out(seqs.size());
    detail::parallel_for(seqs.size(), threads, [&](size_t i) {
        ForwardOptions opts;
        opts.suppression = &suppression;
        opts.logits_from = first_target_position(seqs[i]) - 1;
        out[i]           = target_nll(seqs[i], model.forward(seqs[i].ids, opts));
    });
    return out;
}

double mean_delta(std::span<const double> ablated, std::span<const double> base) {
    std::vector<double> d(ablated.size());
    for (size_t i = 0; i < d.size(); ++i) {
        d[i] = ablated[i] - base[i];
    }
    return exact_sum(d) / static_cast<double>(d.size());
}

} // namespace

double mean_nll(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                const SuppressionMap & suppression, size_t threads) {
    if (dataset.empty()) {
        fail(ErrorKind::input, "mean_nll: empty dataset");
    }
    const Transformer model(checkpoint);
    const auto        seqs = encode_all(checkpoint, dataset);
    const auto        nlls = example_nlls(model, seqs, suppression, threads);
    return exact_sum(nlls) / static_cast<double>(nlls.size());
}

CausalValidation causal_validation(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                                   const PcsTable & pcs, size_t k, std::span<const uint64_t> seeds,
                                   size_t threads) {
    if (dataset.empty()) {
        fail(ErrorKind::input, "causal_validation: empty dataset");
    }
    if (seeds.size() < 5) {
        fail(ErrorKind::input, "causal_validation: random controls need at least 5 seeds, got " +
                                   std::to_string(seeds.size()));
    }
    const ModelConfig & cfg = checkpoint.config();
    if (pcs.num_layers != cfg.num_layers || pcs.num_heads != cfg.num_heads) {
        fail(ErrorKind::config, "causal_validation: PCS table shape does not match model config");
    }
    const Transformer model(checkpoint);
    const auto        seqs = encode_all(checkpoint, dataset);
    const auto        base = example_nlls(model, seqs, SuppressionMap::zeros(cfg), threads);

    CausalValidation out;
    out.k        = k;
    out.base_nll = exact_sum(base) / static_cast<double>(base.size());
    out.seeds.assign(seeds.begin(), seeds.end());

    const HeadSet        top       = select_heads(pcs, k);
    const SuppressionMap top_map   = SuppressionMap::binary(cfg, top.heads);
    CausalCondition      top_cond{"top_pcs", {mean_delta(example_nlls(model, seqs, top_map, threads), base)}, {}};
    top_cond.interval = t_interval(top_cond.deltas);

    CausalCondition heads_cond{"random_heads", {}, {}};
    CausalCondition mask_cond{"random_mask", {}, {}};
    for (uint64_t seed : seeds) {
        const SuppressionMap rh = random_head_mask(cfg.num_layers, cfg.num_heads, k, seed);
        heads_cond.deltas.push_back(mean_delta(example_nlls(model, seqs, rh, threads), base));
        const SuppressionMap rm = random_matched_mask(top_map, seed);
        mask_cond.deltas.push_back(mean_delta(example_nlls(model, seqs, rm, threads), base));
    }
    heads_cond.interval = t_interval(heads_cond.deltas);
    mask_cond.interval  = t_interval(mask_cond.deltas);
    out.conditions      = {std::move(top_cond), std::move(heads_cond), std::move(mask_cond)};
    return out;
}

double improved_fraction(const SweepRow & base, const SweepRow & row) {
    if (base.users.size() != row.users.size() || base.users.empty()) {
        fail(ErrorKind::input, "improved_fraction: rows cover different users");
    }
    size_t better = 0;
    for (size_t i = 0; i < base.users.size(); ++i) {
        if (base.users[i].user_id != row.users[i].user_id) {
            fail(ErrorKind::input, "improved_fraction: rows cover different users");
        }
        better += row.users[i].alignment > base.users[i].alignment ? 1 : 0;
    }
    return static_cast<double>(better) / static_cast<double>(base.users.size());
}

// ---- SteeringEvaluator ---------------------------------------------------------

struct SteeringEvaluator::Impl {
    struct Item {
        size_t               user = 0; // index into user_ids
        TokenSequence        seq;
        size_t               first = 0; // first target position
        std::vector<TokenId> targets;
        std::vector<float>   pref; // targets.size() rows of vocab logits
    };

    const ModelCheckpoint &           checkpoint;
    Transformer                       model;
    std::vector<const Example *>      examples;
    std::vector<std::string>          user_ids;
    std::vector<const PreferenceSpec *> specs;
    std::vector<Item>                 items;
    size_t                            vocab   = 0;
    size_t                            threads = 1;

    Impl(const ModelCheckpoint & ckpt, size_t nthreads) : checkpoint(ckpt), model(ckpt), threads(nthreads) {}

    // Logit rows predicting each target token of `seq`.
    std::vector<float> target_rows(const TokenSequence & seq, size_t first, const SuppressionMap * supp) const {
        ForwardOptions opts;
        opts.suppression = supp;
        opts.logits_from = first - 1;
        ForwardResult r  = model.forward(seq.ids, opts);
        std::vector<float> rows;
        rows.reserve((seq.size() - first) * vocab);
        for (size_t t = first; t < seq.size(); ++t) {
            const auto row = r.logits_at(t - 1);
            rows.insert(rows.end(), row.begin(), row.end());
        }
        return rows;
    }

    // NLL and alignment of one example at one gamma. gen == nullptr scores
    // the unsuppressed distribution directly.
    void score(const Item & it, const float * gen, double gamma, double & nll, double & align) const {
        const PreferenceSpec & spec = *specs[it.user];
        double                 nsum = 0.0, asum = 0.0;
        for (size_t r = 0; r < it.targets.size(); ++r) {
            std::span<const float> p(it.pref.data() + r * vocab, vocab);
            std::vector<float>     c = gen ? combine_logits(p, std::span<const float>(gen + r * vocab, vocab), gamma)
                                           : std::vector<float>(p.begin(), p.end());
            nsum += log_sum_exp(c) - c[static_cast<size_t>(it.targets[r])];
            const std::vector<double> dist = softmax(c);
            asum += alignment_score(dist, spec);
        }
        const double n = static_cast<double>(it.targets.size());
        nll            = nsum / n;
        align          = asum / n;
    }

    // Aggregates per-example values into a row: per-user means in example
    // order, then the unweighted mean over users.
    SweepRow make_row(const std::vector<double> & nll, const std::vector<double> & align) const {
        SweepRow            row;
        std::vector<double> un(user_ids.size(), 0.0), ua(user_ids.size(), 0.0);
        std::vector<size_t> cnt(user_ids.size(), 0);
        for (size_t i = 0; i < items.size(); ++i) {
            un[items[i].user] += nll[i];
            ua[items[i].user] += align[i];
            ++cnt[items[i].user];
        }
        double tn = 0.0, ta = 0.0;
        for (size_t u = 0; u < user_ids.size(); ++u) {
            const double c = static_cast<double>(cnt[u]);
            row.users.push_back({user_ids[u], un[u] / c, ua[u] / c});
            tn += un[u] / c;
            ta += ua[u] / c;
        }
        row.mean_nll       = tn / static_cast<double>(user_ids.size());
        row.mean_alignment = ta / static_cast<double>(user_ids.size());
        return row;
    }

    // gen_for(i) returns the contrast rows for item i.
    template <typename GenFn>
    std::vector<SweepRow> sweep(GenFn && gen_for, std::vector<double> gammas) const {
        std::stable_sort(gammas.begin(), gammas.end());
        const size_t                     ng = gammas.size();
        std::vector<std::vector<double>> nll(ng, std::vector<double>(items.size()));
        std::vector<std::vector<double>> align(ng, std::vector<double>(items.size()));
        detail::parallel_for(items.size(), threads, [&](size_t i) {
            const std::vector<float> gen = gen_for(i);
            for (size_t g = 0; g < ng; ++g) {
                score(items[i], gen.data(), gammas[g], nll[g][i], align[g][i]);
            }
        });
        std::vector<SweepRow> rows;
        for (size_t g = 0; g < ng; ++g) {
            rows.push_back(make_row(nll[g], align[g]));
            rows.back().gamma = gammas[g];
        }
        return rows;
    }
};

SteeringEvaluator::SteeringEvaluator(const ModelCheckpoint & checkpoint, std::span<const Example> eval,
                                     const UserSpecs & specs, size_t threads)
    : impl_(std::make_unique<Impl>(checkpoint, threads)) {
    if (eval.empty()) {
        fail(ErrorKind::input, "steering evaluation: empty eval split");
    }
    Impl & m = *impl_;
    m.vocab  = checkpoint.config().vocab_size;
    std::map<std::string, size_t> index;
    for (const Example & ex : eval) {
        index.emplace(ex.user_id, 0);
    }
    for (auto & [id, idx] : index) {
        const auto it = specs.find(id);
        if (it == specs.end()) {
            fail(ErrorKind::input, "steering evaluation: no preference spec for user '" + id + "'");
        }
        idx = m.user_ids.size();
        m.user_ids.push_back(id);
        m.specs.push_back(&it->second);
    }
    const auto seqs = encode_all(checkpoint, eval);
    m.items.resize(eval.size());
    for (size_t i = 0; i < eval.size(); ++i) {
        m.examples.push_back(&eval[i]);
        Impl::Item & it = m.items[i];
        it.user         = index.at(eval[i].user_id);
        it.seq          = seqs[i];
        it.first        = first_target_position(it.seq);
        it.targets.assign(it.seq.ids.begin() + static_cast<std::ptrdiff_t>(it.first), it.seq.ids.end());
    }
    detail::parallel_for(m.items.size(), threads, [&](size_t i) {
        m.items[i].pref = m.target_rows(m.items[i].seq, m.items[i].first, nullptr);
    });
}

SteeringEvaluator::~SteeringEvaluator() = default;

SweepRow SteeringEvaluator::vanilla() const {
    const Impl &        m = *impl_;
    std::vector<double> nll(m.items.size()), align(m.items.size());
    detail::parallel_for(m.items.size(), m.threads,
                         [&](size_t i) { m.score(m.items[i], nullptr, 0.0, nll[i], align[i]); });
    SweepRow row = m.make_row(nll, align);
    row.method   = "vanilla";
    row.routing  = "none";
    return row;
}

std::vector<SweepRow> SteeringEvaluator::dps(const SuppressionFor & suppression, std::span<const double> gammas,
                                             const std::string & method, size_t k, const std::string & routing) const {
    if (std::find(gammas.begin(), gammas.end(), 0.0) == gammas.end()) {
        fail(ErrorKind::input, "gamma sweep: the gamma list must include 0");
    }
    const Impl & m = *impl_;
    for (const std::string & id : m.user_ids) {
        if (!suppression(id).matches(m.checkpoint.config())) {
            fail(ErrorKind::config, "gamma sweep: suppression map for '" + id + "' does not match model config");
        }
    }
    auto rows = m.sweep(
        [&](size_t i) {
            const Impl::Item & it = m.items[i];
            return m.target_rows(it.seq, it.first, &suppression(m.examples[i]->user_id));
        },
        std::vector<double>(gammas.begin(), gammas.end()));
    for (SweepRow & r : rows) {
        r.method  = method;
        r.k       = k;
        r.routing = routing;
    }
    return rows;
}

std::vector<SweepRow> SteeringEvaluator::context_contrast(std::span<const double> gammas) const {
    const Impl & m    = *impl_;
    const auto   tok  = Tokenizer::for_checkpoint(m.checkpoint);
    auto         rows = m.sweep(
        [&](size_t i) {
            const TokenSequence bare =
                tok.encode_example(*m.examples[i], m.checkpoint.config().max_seq_len, false);
            return m.target_rows(bare, first_target_position(bare), nullptr);
        },
        std::vector<double>(gammas.begin(), gammas.end()));
    for (SweepRow & r : rows) {
        r.method  = "context_contrast";
        r.routing = "none";
    }
    return rows;
}

std::vector<SweepRow> SteeringEvaluator::k_sweep(const PcsTable & pcs, std::span<const size_t> ks,
                                                 double gamma) const {
    const Impl &          m = *impl_;
    std::vector<SweepRow> out;
    for (size_t k : ks) {
        const SuppressionMap supp = SuppressionMap::binary(m.checkpoint.config(), select_heads(pcs, k).heads);
        auto                 rows = m.sweep(
            [&](size_t i) { return m.target_rows(m.items[i].seq, m.items[i].first, &supp); }, {gamma});
        rows[0].method  = "dps";
        rows[0].k       = k;
        rows[0].routing = "global";
        out.push_back(std::move(rows[0]));
    }
    return out;
}

std::vector<SweepRow> gamma_sweep(const ModelCheckpoint & checkpoint, std::span<const Example> eval,
                                  const UserSpecs & specs, const SuppressionMap & suppression,
                                  std::span<const double> gammas, size_t threads) {
    const SteeringEvaluator evaluator(checkpoint, eval, specs, threads);
    size_t                  k = 0;
    for (float s : suppression.weights()) {
        k += s > 0.0f ? 1 : 0;
    }
    return evaluator.dps([&](const std::string &) -> const SuppressionMap & { return suppression; }, gammas, "dps",
                         k, "global");
}

std::vector<UserMetrics> generation_alignment(const ModelCheckpoint & checkpoint, std::span<const Example> eval,
                                              const UserSpecs & specs, const SuppressionFor & suppression,
                                              const DecodeConfig & config, size_t per_user, size_t threads) {
    const Tokenizer tok = Tokenizer::for_checkpoint(checkpoint);
    struct Job {
        size_t          user;
        const Example * ex;
    };
    std::map<std::string, std::vector<const Example *>> by_user;
    for (const Example & ex : eval) {
        auto & v = by_user[ex.user_id];
        if (v.size() < per_user) {
            v.push_back(&ex);
        }
    }
    std::vector<std::string> ids;
    std::vector<Job>         jobs;
    for (const auto & [id, exs] : by_user) {
        if (!specs.contains(id)) {
            fail(ErrorKind::input, "generation alignment: no preference spec for user '" + id + "'");
        }
        for (const Example * ex : exs) {
            jobs.push_back({ids.size(), ex});
        }
        ids.push_back(id);
    }
    std::vector<double> score(jobs.size(), -1.0);
    detail::parallel_for(jobs.size(), threads, [&](size_t j) {
        const Example & ex  = *jobs[j].ex;
        DecodeConfig    cfg = config;
        cfg.seed            = derive_seed(config.seed, "generation", j);
        cfg.trace_top_n     = 0;
        const TokenSequence ctx =
            tok.encode_context(ex, checkpoint.config().max_seq_len, true, config.max_new_tokens);
        const DecodeTrace   trace = dps_decode(checkpoint, ctx, suppression(ex.user_id), cfg);
        std::vector<TokenId> out  = trace.tokens;
        if (!out.empty() && out.back() == tokens::EOS) {
            out.pop_back();
        }
        if (!out.empty()) {
            score[j] = alignment_score(out, specs.at(ex.user_id));
        }
    });
    std::vector<UserMetrics> result(ids.size());
    std::vector<size_t>      cnt(ids.size(), 0);
    for (size_t u = 0; u < ids.size(); ++u) {
        result[u].user_id = ids[u];
    }
    for (size_t j = 0; j < jobs.size(); ++j) {
        if (score[j] >= 0.0) {
            result[jobs[j].user].alignment += score[j];
            ++cnt[jobs[j].user];
        }
    }
    for (size_t u = 0; u < ids.size(); ++u) {
        if (cnt[u] > 0) {
            result[u].alignment /= static_cast<double>(cnt[u]);
        }
    }
    return result;
}

// ---- sparsity --------------------------------------------------------------

namespace {

void require_finite(const PcsTable & pcs) {
    if (pcs.scores.empty()) {
        fail(ErrorKind::input, "PCS table is empty");
    }
    for (double s : pcs.scores) {
        if (!std::isfinite(s)) {
            fail(ErrorKind::input, "PCS table contains a non-finite score");
        }
    }
}

double positive_total(const PcsTable & pcs) {
    std::vector<double> pos;
    for (double s : pcs.scores) {
        if (s > 0.0) {
            pos.push_back(s);
        }
    }
    return exact_sum(pos);
}

} // namespace

SparsityStats pcs_sparsity_stats(const PcsTable & pcs, size_t k) {
    require_finite(pcs);
    SparsityStats out;
    const size_t  n = pcs.scores.size();
    out.k           = std::min(k, n);

    const double total = positive_total(pcs);
    size_t       npos  = 0;
    for (double s : pcs.scores) {
        npos += s > 0.0 ? 1 : 0;
    }
    out.positive_fraction = static_cast<double>(npos) / static_cast<double>(n);
    if (total == 0.0) {
        out.degenerate = true;
        return out;
    }

    std::vector<double> sorted = pcs.scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    std::vector<double> top;
    for (size_t i = 0; i < out.k && sorted[i] > 0.0; ++i) {
        top.push_back(sorted[i]);
    }
    out.top_k_mass = exact_sum(top) / total;

    const double        mean = exact_sum(pcs.scores) / static_cast<double>(n);
    std::vector<double> d2, d4;
    for (double s : pcs.scores) {
        const double d = (s - mean) * (s - mean);
        d2.push_back(d);
        d4.push_back(d * d);
    }
    const double m2 = exact_sum(d2) / static_cast<double>(n);
    const double m4 = exact_sum(d4) / static_cast<double>(n);
    out.excess_kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
    return out;
}

double random_subset_mass(const PcsTable & pcs, size_t k, uint64_t seed, size_t draws) {
    require_finite(pcs);
    const double total = positive_total(pcs);
    if (total == 0.0 || draws == 0) {
        return 0.0;
    }
    const size_t        n = pcs.scores.size();
    k                     = std::min(k, n);
    Rng                 rng(derive_seed(seed, "sparsity.control"));
    std::vector<size_t> idx(n);
    std::vector<double> masses;
    for (size_t d = 0; d < draws; ++d) {
        std::iota(idx.begin(), idx.end(), size_t{0});
        double mass = 0.0;
        for (size_t i = 0; i < k; ++i) {
            std::swap(idx[i], idx[i + rng.below(n - i)]);
            mass += std::max(0.0, pcs.scores[idx[i]]);
        }
        masses.push_back(mass / total);
    }
    return exact_sum(masses) / static_cast<double>(draws);
}

} // namespace dps
