#include "dps/synth.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace dps {

using nlohmann::json;

std::vector<TokenId> VocabPartition::cluster_block(uint32_t cluster) const {
    std::vector<TokenId> block(block_size);
    for (uint32_t i = 0; i < block_size; ++i) {
        block[i] = static_cast<TokenId>(cluster * block_size + i);
    }
    return block;
}

std::vector<TokenId> VocabPartition::generic_block(uint32_t num_clusters) const {
    std::vector<TokenId> block;
    for (TokenId id = static_cast<TokenId>(num_clusters * block_size); id < 256; ++id) {
        block.push_back(id);
    }
    return block;
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train:    return "train";
        case Split::discover: return "discover";
        case Split::eval:     return "eval";
    }
    return "train";
}

namespace {

std::string user_name(uint32_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "user_%03u", index);
    return buf;
}

TokenId draw_token(Rng & rng, const PreferenceSpec & spec, const std::vector<TokenId> & generic, double marker_rate) {
    if (!spec.style_markers.empty() && rng.uniform() < marker_rate) {
        return spec.style_markers[rng.below(spec.style_markers.size())];
    }
    if (rng.uniform() < spec.preference_strength) {
        return spec.preferred_vocab[rng.below(spec.preferred_vocab.size())];
    }
    return generic[rng.below(generic.size())];
}

std::string to_text(const std::vector<TokenId> & ids) {
    std::string s;
    for (TokenId id : ids) {
        s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return s;
}

uint32_t cluster_count(const UserSpecs & specs) {
    uint32_t n = 0;
    for (const auto & [id, spec] : specs) {
        n = std::max(n, spec.cluster_id + 1);
    }
    return n;
}

} // namespace

UserSpecs generate_users(uint32_t num_clusters, uint32_t users_per_cluster, const VocabPartition & partition,
                         uint64_t seed, double base_strength, double strength_jitter, uint32_t markers_per_user) {
    if (num_clusters < 1 || users_per_cluster < 1 || partition.block_size < 1) {
        fail(ErrorKind::input, "generate_users: counts must be >= 1");
    }
    if (uint64_t{num_clusters} * partition.block_size >= 256) {
        fail(ErrorKind::input, "generate_users: " + std::to_string(num_clusters) + " blocks of " +
                                   std::to_string(partition.block_size) +
                                   " tokens leave no generic vocabulary in 256 byte tokens");
    }
    if (!(base_strength > 0.0 && base_strength <= 1.0)) {
        fail(ErrorKind::input, "generate_users: preference strength must lie in (0,1]");
    }
    const std::vector<TokenId> generic = partition.generic_block(num_clusters);
    if (markers_per_user > generic.size()) {
        fail(ErrorKind::input, "generate_users: more style markers than generic tokens");
    }

    UserSpecs specs;
    for (uint32_t c = 0; c < num_clusters; ++c) {
        for (uint32_t i = 0; i < users_per_cluster; ++i) {
            const std::string id = user_name(c * users_per_cluster + i);
            Rng               rng(derive_seed(seed, "synth.user." + id));
            PreferenceSpec    spec;
            spec.cluster_id      = c;
            spec.preferred_vocab = partition.cluster_block(c);
            const double jitter  = strength_jitter * (2.0 * rng.uniform() - 1.0);
            spec.preference_strength = std::clamp(base_strength + jitter, 0.05, 1.0);

            std::vector<TokenId> pool = generic;
            for (uint32_t m = 0; m < markers_per_user; ++m) {
                const size_t j = m + rng.below(pool.size() - m);
                std::swap(pool[m], pool[j]);
                spec.style_markers.push_back(pool[m]);
            }
            std::sort(spec.style_markers.begin(), spec.style_markers.end());
            specs.emplace(id, std::move(spec));
        }
    }
    return specs;
}

DatasetHandle generate_examples(const UserSpecs & specs, uint32_t count_per_user, const SequenceLengths & lengths,
                                uint64_t seed, double marker_rate, Split split,
                                const std::vector<std::pair<std::string, std::string>> * exclude) {
    if (lengths.target_len < 1) {
        fail(ErrorKind::input, "generate_examples: target length must be >= 1");
    }
    std::set<std::pair<std::string, std::string>> used;
    if (exclude) {
        used.insert(exclude->begin(), exclude->end());
    }
    DatasetHandle out;
    out.split          = split;
    out.generator_seed = seed;
    out.users          = specs;

    const uint32_t num_clusters = cluster_count(specs);
    for (const auto & [user_id, spec] : specs) {
        if (spec.preferred_vocab.empty()) {
            fail(ErrorKind::input, "user '" + user_id + "' has an empty preferred vocabulary");
        }
        const uint32_t block = static_cast<uint32_t>(spec.preferred_vocab.size());
        const auto     gen   = VocabPartition{block}.generic_block(num_clusters);
        Rng            rng(derive_seed(seed, "synth.examples." + std::string(to_string(split)) + "." + user_id));
        for (uint32_t n = 0; n < count_per_user; ++n) {
            Example ex;
            ex.user_id = user_id;
            for (uint32_t s = 0; s < lengths.profile_snippets; ++s) {
                std::vector<TokenId> snippet(lengths.snippet_len);
                for (TokenId & id : snippet) {
                    id = draw_token(rng, spec, gen, marker_rate);
                }
                ex.profile_texts.push_back(to_text(snippet));
            }
            std::vector<TokenId> input(lengths.input_len);
            for (TokenId & id : input) {
                id = gen[rng.below(gen.size())];
            }
            ex.input_text = to_text(input);
            do {
                std::vector<TokenId> target(lengths.target_len);
                for (TokenId & id : target) {
                    id = draw_token(rng, spec, gen, marker_rate);
                }
                ex.target_text = to_text(target);
            } while (!used.emplace(user_id, ex.target_text).second);
            out.examples.push_back(std::move(ex));
        }
    }
    return out;
}

std::vector<std::string> Benchmark::user_ids() const {
    std::vector<std::string> ids;
    for (const auto & [id, spec] : users) {
        ids.push_back(id);
    }
    return ids;
}

const DatasetHandle & Benchmark::split(Split s) const {
    switch (s) {
        case Split::train:    return train;
        case Split::discover: return discover;
        case Split::eval:     return eval;
    }
    return train;
}

Benchmark generate_benchmark(const SynthParams & params, uint64_t seed) {
    Benchmark bench;
    bench.params = params;
    bench.seed   = seed;
    bench.users  = generate_users(params.num_clusters, params.users_per_cluster, VocabPartition{params.block_size},
                                  derive_seed(seed, "synth.users"), params.preference_strength,
                                  params.strength_jitter, params.markers_per_user);

    std::vector<std::pair<std::string, std::string>> used;
    auto remember = [&](const DatasetHandle & d) {
        for (const Example & ex : d.examples) {
            used.emplace_back(ex.user_id, ex.target_text);
        }
    };
    bench.train = generate_examples(bench.users, params.train_per_user, params.lengths,
                                    derive_seed(seed, "synth.split", 0), params.marker_rate, Split::train, &used);
    remember(bench.train);
    bench.discover = generate_examples(bench.users, params.discover_per_user, params.lengths,
                                       derive_seed(seed, "synth.split", 1), params.marker_rate, Split::discover, &used);
    remember(bench.discover);
    bench.eval = generate_examples(bench.users, params.eval_per_user, params.lengths,
                                   derive_seed(seed, "synth.split", 2), params.marker_rate, Split::eval, &used);
    return bench;
}

double alignment_score(std::span<const TokenId> tokens, const PreferenceSpec & spec) {
    if (tokens.empty()) {
        fail(ErrorKind::input, "alignment_score: empty sequence");
    }
    size_t hits = 0;
    for (TokenId id : tokens) {
        hits += std::binary_search(spec.preferred_vocab.begin(), spec.preferred_vocab.end(), id) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(tokens.size());
}

double alignment_score(std::span<const double> distribution, const PreferenceSpec & spec) {
    if (distribution.empty()) {
        fail(ErrorKind::input, "alignment_score: empty distribution");
    }
    double mass = 0.0;
    for (TokenId id : spec.preferred_vocab) {
        if (id >= 0 && static_cast<size_t>(id) < distribution.size()) {
            mass += distribution[static_cast<size_t>(id)];
        }
    }
    return mass;
}

std::string latin1_to_utf8(std::string_view bytes) {
    std::string out;
    for (unsigned char c : bytes) {
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back(static_cast<char>(0xc0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
        }
    }
    return out;
}

std::string utf8_to_latin1(std::string_view text) {
    std::string out;
    for (size_t i = 0; i < text.size(); ++i) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else if ((c == 0xc2 || c == 0xc3) && i + 1 < text.size()) {
            const auto d = static_cast<unsigned char>(text[++i]);
            out.push_back(static_cast<char>(((c & 0x03) << 6) | (d & 0x3f)));
        } else {
            fail(ErrorKind::schema, "text contains a code point outside Latin-1");
        }
    }
    return out;
}

namespace {

json example_to_json(const Example & ex) {
    json profile = json::array();
    for (const std::string & p : ex.profile_texts) {
        profile.push_back(latin1_to_utf8(p));
    }
    return json{{"user_id", ex.user_id},
                {"profile", std::move(profile)},
                {"input", latin1_to_utf8(ex.input_text)},
                {"target", latin1_to_utf8(ex.target_text)}};
}

Example example_from_json(const json & j) {
    Example ex;
    ex.user_id = j.at("user_id").get<std::string>();
    for (const auto & p : j.at("profile")) {
        ex.profile_texts.push_back(utf8_to_latin1(p.get<std::string>()));
    }
    ex.input_text  = utf8_to_latin1(j.at("input").get<std::string>());
    ex.target_text = utf8_to_latin1(j.at("target").get<std::string>());
    return ex;
}

json params_to_json(const SynthParams & p) {
    return json{{"num_clusters", p.num_clusters},
                {"users_per_cluster", p.users_per_cluster},
                {"block_size", p.block_size},
                {"preference_strength", p.preference_strength},
                {"strength_jitter", p.strength_jitter},
                {"markers_per_user", p.markers_per_user},
                {"marker_rate", p.marker_rate},
                {"profile_snippets", p.lengths.profile_snippets},
                {"snippet_len", p.lengths.snippet_len},
                {"input_len", p.lengths.input_len},
                {"target_len", p.lengths.target_len},
                {"train_per_user", p.train_per_user},
                {"discover_per_user", p.discover_per_user},
                {"eval_per_user", p.eval_per_user}};
}

SynthParams params_from_json(const json & j) {
    SynthParams p;
    p.num_clusters              = j.at("num_clusters").get<uint32_t>();
    p.users_per_cluster         = j.at("users_per_cluster").get<uint32_t>();
    p.block_size                = j.at("block_size").get<uint32_t>();
    p.preference_strength       = j.at("preference_strength").get<double>();
    p.strength_jitter           = j.at("strength_jitter").get<double>();
    p.markers_per_user          = j.at("markers_per_user").get<uint32_t>();
    p.marker_rate               = j.at("marker_rate").get<double>();
    p.lengths.profile_snippets  = j.at("profile_snippets").get<uint32_t>();
    p.lengths.snippet_len       = j.at("snippet_len").get<uint32_t>();
    p.lengths.input_len         = j.at("input_len").get<uint32_t>();
    p.lengths.target_len        = j.at("target_len").get<uint32_t>();
    p.train_per_user            = j.at("train_per_user").get<uint32_t>();
    p.discover_per_user         = j.at("discover_per_user").get<uint32_t>();
    p.eval_per_user             = j.at("eval_per_user").get<uint32_t>();
    return p;
}

} // namespace

void save_benchmark(const Benchmark & bench, const std::filesystem::path & path) {
    json users = json::array();
    for (const auto & [id, spec] : bench.users) {
        users.push_back(json{{"user_id", id},
                             {"cluster_id", spec.cluster_id},
                             {"preferred_vocab", spec.preferred_vocab},
                             {"preference_strength", spec.preference_strength},
                             {"style_markers", spec.style_markers}});
    }
    json splits;
    for (Split s : {Split::train, Split::discover, Split::eval}) {
        json arr = json::array();
        for (const Example & ex : bench.split(s).examples) {
            arr.push_back(example_to_json(ex));
        }
        splits[std::string(to_string(s))] = json{{"generator_seed", bench.split(s).generator_seed},
                                                  {"examples", std::move(arr)}};
    }
    const json doc{{"format", "dps-benchmark"},
                   {"version", 1},
                   {"seed", bench.seed},
                   {"params", params_to_json(bench.params)},
                   {"users", std::move(users)},
                   {"splits", std::move(splits)}};
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    out << doc.dump(1) << "\n";
    if (!out) {
        fail(ErrorKind::io, "write to '" + path.string() + "' failed");
    }
}

Benchmark load_benchmark(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open dataset '" + path.string() + "'");
    }
    Benchmark bench;
    try {
        const json doc = json::parse(in);
        if (doc.at("format").get<std::string>() != "dps-benchmark") {
            fail(ErrorKind::schema, "dataset: unexpected format tag");
        }
        bench.seed   = doc.at("seed").get<uint64_t>();
        bench.params = params_from_json(doc.at("params"));
        for (const auto & u : doc.at("users")) {
            PreferenceSpec spec;
            spec.cluster_id          = u.at("cluster_id").get<uint32_t>();
            spec.preferred_vocab     = u.at("preferred_vocab").get<std::vector<TokenId>>();
            spec.preference_strength = u.at("preference_strength").get<double>();
            spec.style_markers       = u.at("style_markers").get<std::vector<TokenId>>();
            bench.users.emplace(u.at("user_id").get<std::string>(), std::move(spec));
        }
        for (Split s : {Split::train, Split::discover, Split::eval}) {
            const json &    js = doc.at("splits").at(std::string(to_string(s)));
            DatasetHandle & d  = s == Split::train ? bench.train : s == Split::discover ? bench.discover : bench.eval;
            d.split            = s;
            d.generator_seed   = js.at("generator_seed").get<uint64_t>();
            d.users            = bench.users;
            for (const auto & e : js.at("examples")) {
                d.examples.push_back(example_from_json(e));
                if (!bench.users.contains(d.examples.back().user_id)) {
                    fail(ErrorKind::schema, "dataset: example references unknown user '" +
                                                d.examples.back().user_id + "'");
                }
            }
        }
    } catch (const json::exception & e) {
        fail(ErrorKind::schema, std::string("dataset '") + path.string() + "': " + e.what());
    }
    return bench;
}

} // namespace dps
