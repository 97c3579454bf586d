#include "dps/discovery.hpp"

#include "dps/error.hpp"
#include "dps/tokenizer.hpp"
#include "dps/transformer.hpp"
#include "parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace dps {

using nlohmann::json;

bool HeadSet::contains(HeadId h) const {
    return std::find(heads.begin(), heads.end(), h) != heads.end();
}

double exact_sum(std::span<const double> values) {
    std::vector<double> partials;
    for (double x : values) {
        size_t i = 0;
        for (double y : partials) {
            if (std::abs(x) < std::abs(y)) {
                std::swap(x, y);
            }
            const double hi = x + y;
            const double lo = y - (hi - x);
            if (lo != 0.0) {
                partials[i++] = lo;
            }
            x = hi;
        }
        partials.resize(i);
        partials.push_back(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to one double.
    double hi = 0.0;
    if (!partials.empty()) {
        size_t n = partials.size();
        hi       = partials[--n];
        double lo = 0.0;
        while (n > 0) {
            const double x = hi;
            const double y = partials[--n];
            hi             = x + y;
            const double yr = hi - x;
            lo              = y - yr;
            if (lo != 0.0) {
                break;
            }
        }
        if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
            const double y = lo * 2.0;
            const double x = hi + y;
            if (y == x - hi) {
                hi = x;
            }
        }
    }
    return hi;
}

namespace {

PcsTable single_example_pcs(const Transformer & model, const TokenSequence & seq) {
    const ModelConfig & c = model.config();
    PcsTable            table;
    table.num_layers        = c.num_layers;
    table.num_heads         = c.num_heads;
    table.num_examples      = 1;
    table.model_fingerprint = 0;
    table.scores.assign(c.total_heads(), 0.0);

    ForwardOptions base_opts;
    base_opts.logits_from = first_target_position(seq) - 1;
    ResidualTrace trace;
    const double  baseline = target_nll(seq, model.forward(seq.ids, base_opts, trace));

    SuppressionMap map = SuppressionMap::zeros(c);
    for (uint32_t l = 0; l < c.num_layers; ++l) {
        for (uint32_t h = 0; h < c.num_heads; ++h) {
            map.set({l, h}, 1.0f);
            ForwardOptions opts = base_opts;
            opts.suppression    = &map;
            const double ablated = target_nll(seq, model.forward_from(trace, l, opts));
            table.scores[size_t{l} * c.num_heads + h] = ablated - baseline;
            map.set({l, h}, 0.0f);
        }
    }
    return table;
}

} // namespace

std::vector<PcsTable> per_example_pcs(const ModelCheckpoint & checkpoint, std::span<const Example> dataset,
                                      size_t threads) {
    const Transformer model(checkpoint);
    const Tokenizer   tok         = Tokenizer::for_checkpoint(checkpoint);
    const uint64_t    fingerprint = checkpoint.fingerprint();

    std::vector<TokenSequence> seqs;
    seqs.reserve(dataset.size());
    for (const Example & ex : dataset) {
        seqs.push_back(tok.encode_example(ex, checkpoint.config().max_seq_len));
    }
    std::vector<PcsTable> tables(dataset.size());
    detail::parallel_for(dataset.size(), threads, [&](size_t i) {
        tables[i]                   = single_example_pcs(model, seqs[i]);
        tables[i].model_fingerprint = fingerprint;
    });
    return tables;
}

PcsTable average_pcs(std::span<const PcsTable> tables, std::span<const size_t> indices) {
    if (indices.empty()) {
        fail(ErrorKind::input, "average_pcs: no tables to average");
    }
    const PcsTable & first = tables[indices[0]];
    PcsTable         out;
    out.num_layers        = first.num_layers;
    out.num_heads         = first.num_heads;
    out.model_fingerprint = first.model_fingerprint;
    out.scores.assign(first.scores.size(), 0.0);

    size_t              examples = 0;
    std::vector<double> column;
    for (size_t idx : indices) {
        const PcsTable & t = tables[idx];
        if (t.num_layers != first.num_layers || t.num_heads != first.num_heads ||
            t.model_fingerprint != first.model_fingerprint) {
            fail(ErrorKind::config, "average_pcs: tables from different models");
        }
        examples += t.num_examples;
    }
    // Weighted by example count so averaging per-example and pre-averaged
    // tables agree.
    for (size_t h = 0; h < out.scores.size(); ++h) {
        column.clear();
        for (size_t idx : indices) {
            column.push_back(tables[idx].scores[h] * static_cast<double>(tables[idx].num_examples));
        }
        out.scores[h] = exact_sum(column) / static_cast<double>(examples);
    }
    out.num_examples = examples;
    return out;
}

PcsTable average_pcs(std::span<const PcsTable> tables) {
    std::vector<size_t> all(tables.size());
    std::iota(all.begin(), all.end(), size_t{0});
    return average_pcs(tables, all);
}

PcsTable compute_pcs(const ModelCheckpoint & checkpoint, std::span<const Example> dataset, size_t threads) {
    if (dataset.empty()) {
        fail(ErrorKind::input, "compute_pcs: empty dataset");
    }
    return average_pcs(per_example_pcs(checkpoint, dataset, threads));
}

HeadSet select_heads(const PcsTable & pcs, size_t k) {
    const size_t total = pcs.total_heads();
    if (k == 0) {
        warn("select_heads: k=0 selects no heads");
    } else if (k > total) {
        warn("select_heads: k=" + std::to_string(k) + " exceeds the " + std::to_string(total) +
             " available heads; selecting all");
    }
    std::vector<HeadId> order;
    for (uint32_t l = 0; l < pcs.num_layers; ++l) {
        for (uint32_t h = 0; h < pcs.num_heads; ++h) {
            order.push_back({l, h});
        }
    }
    std::stable_sort(order.begin(), order.end(), [&](HeadId a, HeadId b) {
        const double sa = pcs.at(a), sb = pcs.at(b);
        if (sa != sb) {
            return sa > sb;
        }
        return a < b;
    });
    HeadSet set;
    set.k = k;
    order.resize(std::min(k, total));
    set.heads = std::move(order);
    const auto non_positive =
        std::count_if(set.heads.begin(), set.heads.end(), [&](HeadId h) { return !(pcs.at(h) > 0.0); });
    if (non_positive > 0) {
        warn("select_heads: " + std::to_string(non_positive) + " of the selected heads have non-positive PCS");
    }
    return set;
}

double jaccard(const HeadSet & a, const HeadSet & b) {
    const std::set<HeadId> sa(a.heads.begin(), a.heads.end());
    const std::set<HeadId> sb(b.heads.begin(), b.heads.end());
    if (sa.empty() && sb.empty()) {
        return 1.0;
    }
    size_t common = 0;
    for (const HeadId & h : sa) {
        common += sb.count(h);
    }
    const size_t uni = sa.size() + sb.size() - common;
    return static_cast<double>(common) / static_cast<double>(uni);
}

std::vector<std::vector<double>> overlap_matrix(std::span<const HeadSet> sets) {
    const size_t n = sets.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            m[i][j] = m[j][i] = jaccard(sets[i], sets[j]);
        }
    }
    return m;
}

std::vector<std::vector<double>> k_sweep_stability(const PcsTable & pcs, std::span<const size_t> ks) {
    if (ks.empty()) {
        fail(ErrorKind::input, "k_sweep_stability: empty K list");
    }
    std::vector<HeadSet> sets;
    for (size_t k : ks) {
        if (k < 1) {
            fail(ErrorKind::input, "k_sweep_stability: every K must be >= 1");
        }
        sets.push_back(select_heads(pcs, k));
    }
    return overlap_matrix(sets);
}

void save_pcs(const PcsTable & pcs, const std::filesystem::path & path) {
    json scores = json::array();
    for (uint32_t l = 0; l < pcs.num_layers; ++l) {
        json row = json::array();
        for (uint32_t h = 0; h < pcs.num_heads; ++h) {
            row.push_back(pcs.at(l, h));
        }
        scores.push_back(std::move(row));
    }
    const json doc{{"format", "dps-pcs"},
                   {"num_layers", pcs.num_layers},
                   {"num_heads", pcs.num_heads},
                   {"num_examples", pcs.num_examples},
                   {"model_fingerprint", fingerprint_hex(pcs.model_fingerprint)},
                   {"scores", std::move(scores)}};
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << doc.dump(1) << "\n";
}

PcsTable load_pcs(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open PCS table '" + path.string() + "'");
    }
    PcsTable pcs;
    try {
        const json doc = json::parse(in);
        if (doc.at("format").get<std::string>() != "dps-pcs") {
            fail(ErrorKind::schema, "PCS table: unexpected format tag");
        }
        pcs.num_layers        = doc.at("num_layers").get<uint32_t>();
        pcs.num_heads         = doc.at("num_heads").get<uint32_t>();
        pcs.num_examples      = doc.at("num_examples").get<size_t>();
        pcs.model_fingerprint = std::stoull(doc.at("model_fingerprint").get<std::string>(), nullptr, 16);
        const json & scores   = doc.at("scores");
        if (scores.size() != pcs.num_layers) {
            fail(ErrorKind::schema, "PCS table: score rows do not match num_layers");
        }
        for (const auto & row : scores) {
            if (row.size() != pcs.num_heads) {
                fail(ErrorKind::schema, "PCS table: score row length does not match num_heads");
            }
            for (const auto & v : row) {
                const double s = v.get<double>();
                if (!std::isfinite(s)) {
                    fail(ErrorKind::schema, "PCS table: non-finite score");
                }
                pcs.scores.push_back(s);
            }
        }
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("PCS table '") + path.string() + "': " + e.what());
    } catch (const std::invalid_argument &) {
        fail(ErrorKind::schema, "PCS table: malformed model_fingerprint");
    }
    return pcs;
}

void save_head_set(const HeadSet & heads, const std::filesystem::path & path) {
    json list = json::array();
    for (const HeadId & h : heads.heads) {
        list.push_back(json::array({h.layer, h.head}));
    }
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << json{{"format", "dps-heads"}, {"k", heads.k}, {"heads", std::move(list)}}.dump(1) << "\n";
}

HeadSet load_head_set(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open head set '" + path.string() + "'");
    }
    HeadSet set;
    try {
        const json doc = json::parse(in);
        set.k          = doc.at("k").get<size_t>();
        for (const auto & h : doc.at("heads")) {
            set.heads.push_back({h.at(0).get<uint32_t>(), h.at(1).get<uint32_t>()});
        }
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("head set '") + path.string() + "': " + e.what());
    }
    return set;
}

} // namespace dps
