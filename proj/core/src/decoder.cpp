#include "dps/decoder.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"
#include "dps/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace dps {

using nlohmann::json;

std::string_view to_string(Strategy strategy) {
    switch (strategy) {
        case Strategy::greedy:      return "greedy";
        case Strategy::temperature: return "temperature";
        case Strategy::top_k:       return "top-k";
    }
    return "greedy";
}

Strategy strategy_from_string(std::string_view name) {
    if (name == "greedy") {
        return Strategy::greedy;
    }
    if (name == "sample" || name == "temperature") {
        return Strategy::temperature;
    }
    if (name == "top-k" || name == "topk") {
        return Strategy::top_k;
    }
    fail(ErrorKind::input, "unknown decoding strategy '" + std::string(name) + "'");
}

void DecodeConfig::validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        fail(ErrorKind::input, "decode: gamma must be a finite value >= 0");
    }
    if (max_new_tokens < 1) {
        fail(ErrorKind::input, "decode: max_new_tokens must be >= 1");
    }
    if (strategy != Strategy::greedy && !(temperature > 0.0)) {
        fail(ErrorKind::input, "decode: sampling temperature must be > 0");
    }
    if (plausibility_margin && !(*plausibility_margin >= 0.0)) {
        fail(ErrorKind::input, "decode: plausibility margin must be >= 0");
    }
}

std::vector<float> combine_logits(std::span<const float> pref, std::span<const float> gen, double gamma) {
    std::vector<float> out(pref.begin(), pref.end());
    if (gamma == 0.0) {
        return out;
    }
    const float g = static_cast<float>(gamma);
    for (size_t i = 0; i < out.size(); ++i) {
        const float diff = pref[i] - gen[i];
        if (diff != 0.0f) {
            out[i] = pref[i] + g * diff;
        }
    }
    return out;
}

namespace {

std::vector<TopEntry> top_entries(std::span<const float> logits, size_t n) {
    std::vector<size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    n = std::min(n, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(), [&](size_t a, size_t b) {
        return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
    });
    std::vector<TopEntry> out;
    for (size_t i = 0; i < n; ++i) {
        out.push_back({static_cast<TokenId>(idx[i]), logits[idx[i]]});
    }
    return out;
}

void apply_plausibility(std::vector<float> & combined, std::span<const float> pref, double margin) {
    const double lse      = log_sum_exp(pref);
    const float  best     = *std::max_element(pref.begin(), pref.end());
    const double best_log = best - lse;
    for (size_t i = 0; i < combined.size(); ++i) {
        if (pref[i] - lse < best_log - margin) {
            combined[i] = -std::numeric_limits<float>::infinity();
        }
    }
}

void check_room(const ModelConfig & c, const TokenSequence & context, const DecodeConfig & config) {
    if (context.empty()) {
        fail(ErrorKind::input, "decode: empty context");
    }
    if (context.size() + config.max_new_tokens > c.max_seq_len) {
        fail(ErrorKind::length, "decode: context of " + std::to_string(context.size()) + " tokens plus " +
                                    std::to_string(config.max_new_tokens) + " new tokens exceeds max_seq_len " +
                                    std::to_string(c.max_seq_len));
    }
}

// Shared autoregressive loop. `step_logits` fills pref (and gen when the
// method is two-pass) for the current contexts.
template <typename StepFn>
DecodeTrace run_decode(std::string method, const DecodeConfig & config, bool two_pass, StepFn && step_logits) {
    config.validate();
    DecodeTrace trace;
    trace.method = std::move(method);
    trace.config = config;
    Rng rng(derive_seed(config.seed, "decode.sample"));

    std::vector<float> pref, gen;
    for (size_t step = 0; step < config.max_new_tokens; ++step) {
        step_logits(pref, gen);
        DecodeStep rec;
        rec.pref_top = top_entries(pref, config.trace_top_n);
        if (two_pass) {
            rec.gen_top  = top_entries(gen, config.trace_top_n);
            rec.combined = combine_logits(pref, gen, config.gamma);
        } else {
            rec.combined = pref;
        }
        if (config.plausibility_margin) {
            apply_plausibility(rec.combined, pref, *config.plausibility_margin);
        }
        rec.combined_top = top_entries(rec.combined, config.trace_top_n);
        rec.chosen       = choose_token(rec.combined, config, rng);
        trace.tokens.push_back(rec.chosen);
        const bool stop = rec.chosen == tokens::EOS;
        trace.steps.push_back(std::move(rec));
        if (stop) {
            break;
        }
        step_logits.append(trace.tokens.back());
    }
    return trace;
}

size_t mask_start_for(const DecodeConfig & config, size_t context_len) {
    // Decode-only scope leaves the prompt's keys/values untouched and masks
    // every position whose output produces a generated token.
    return config.mask_scope == MaskScope::decode_only ? context_len - 1 : 0;
}

struct SinglePass {
    const Transformer & model;
    std::vector<TokenId> ids;

    void operator()(std::vector<float> & pref, std::vector<float> &) {
        ForwardOptions opts;
        opts.logits_from = ids.size() - 1;
        const auto r     = model.forward(ids, opts);
        pref.assign(r.logits.data.begin(), r.logits.data.end());
    }
    void append(TokenId id) { ids.push_back(id); }
};

struct HeadContrast {
    const Transformer &    model;
    const SuppressionMap & suppression;
    std::vector<TokenId>   ids;
    size_t                 mask_start;

    void operator()(std::vector<float> & pref, std::vector<float> & gen) {
        ForwardOptions opts;
        opts.logits_from = ids.size() - 1;
        const auto rp    = model.forward(ids, opts);
        pref.assign(rp.logits.data.begin(), rp.logits.data.end());
        opts.suppression = &suppression;
        opts.mask_start  = mask_start;
        const auto rg    = model.forward(ids, opts);
        gen.assign(rg.logits.data.begin(), rg.logits.data.end());
    }
    void append(TokenId id) { ids.push_back(id); }
};

struct ContextContrast {
    const Transformer &  model;
    std::vector<TokenId> with_ids;
    std::vector<TokenId> without_ids;

    void operator()(std::vector<float> & pref, std::vector<float> & gen) {
        ForwardOptions opts;
        opts.logits_from = with_ids.size() - 1;
        const auto rp    = model.forward(with_ids, opts);
        pref.assign(rp.logits.data.begin(), rp.logits.data.end());
        opts.logits_from = without_ids.size() - 1;
        const auto rg    = model.forward(without_ids, opts);
        gen.assign(rg.logits.data.begin(), rg.logits.data.end());
    }
    void append(TokenId id) {
        with_ids.push_back(id);
        without_ids.push_back(id);
    }
};

} // namespace

TokenId choose_token(std::span<const float> logits, const DecodeConfig & config, Rng & rng) {
    if (config.strategy == Strategy::greedy) {
        return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    std::vector<float> work(logits.begin(), logits.end());
    if (config.strategy == Strategy::top_k && config.top_k > 0 && config.top_k < work.size()) {
        const auto  keep      = top_entries(logits, config.top_k);
        const float threshold = keep.back().logit;
        size_t      kept_at_threshold = 0;
        for (const TopEntry & e : keep) {
            kept_at_threshold += e.logit == threshold ? 1 : 0;
        }
        // Keep exactly the top-k entries (ties resolved toward lower ids).
        for (size_t i = 0; i < work.size(); ++i) {
            if (work[i] < threshold) {
                work[i] = -std::numeric_limits<float>::infinity();
            } else if (work[i] == threshold) {
                if (kept_at_threshold > 0) {
                    --kept_at_threshold;
                } else {
                    work[i] = -std::numeric_limits<float>::infinity();
                }
            }
        }
    }
    const std::vector<double> p = softmax(work, config.temperature);
    const double              u = rng.uniform();
    double                    acc = 0.0;
    size_t                    last_nonzero = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            last_nonzero = i;
        }
        acc += p[i];
        if (u < acc) {
            return static_cast<TokenId>(i);
        }
    }
    return static_cast<TokenId>(last_nonzero);
}

DecodeTrace dps_decode(const ModelCheckpoint & checkpoint, const TokenSequence & context,
                       const SuppressionMap & suppression, const DecodeConfig & config) {
    check_room(checkpoint.config(), context, config);
    if (!suppression.matches(checkpoint.config())) {
        fail(ErrorKind::config, "dps_decode: suppression map shape does not match model config");
    }
    const Transformer model(checkpoint);
    HeadContrast      fn{model, suppression, context.ids, mask_start_for(config, context.size())};
    return run_decode("dps", config, true, fn);
}

DecodeTrace vanilla_decode(const ModelCheckpoint & checkpoint, const TokenSequence & context,
                           const DecodeConfig & config) {
    check_room(checkpoint.config(), context, config);
    const Transformer model(checkpoint);
    SinglePass        fn{model, context.ids};
    return run_decode("vanilla", config, false, fn);
}

DecodeTrace context_contrast_decode(const ModelCheckpoint & checkpoint, const TokenSequence & with_profile,
                                    const TokenSequence & without_profile, const DecodeConfig & config) {
    check_room(checkpoint.config(), with_profile, config);
    check_room(checkpoint.config(), without_profile, config);
    const Transformer model(checkpoint);
    ContextContrast   fn{model, with_profile.ids, without_profile.ids};
    return run_decode("context-contrast", config, true, fn);
}

SuppressionMap random_head_mask(uint32_t num_layers, uint32_t num_heads, size_t k, uint64_t seed) {
    const size_t total = size_t{num_layers} * num_heads;
    if (k > total) {
        fail(ErrorKind::input, "random_head_mask: k=" + std::to_string(k) + " exceeds " + std::to_string(total) +
                                   " heads");
    }
    std::vector<size_t> idx(total);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(derive_seed(seed, "control.random_heads"));
    for (size_t i = 0; i < k; ++i) {
        std::swap(idx[i], idx[i + rng.below(total - i)]);
    }
    SuppressionMap map(num_layers, num_heads);
    for (size_t i = 0; i < k; ++i) {
        map.set({static_cast<uint32_t>(idx[i] / num_heads), static_cast<uint32_t>(idx[i] % num_heads)}, 1.0f);
    }
    return map;
}

SuppressionMap random_matched_mask(const SuppressionMap & reference, uint64_t seed) {
    const size_t total = reference.size();
    const double mass  = reference.l1_mass();
    Rng          rng(derive_seed(seed, "control.random_mask"));
    std::vector<double> w(total);
    for (double & v : w) {
        v = rng.uniform();
    }
    // Scale to the reference mass; entries pushed past 1 are clipped and the
    // excess spread over the remaining entries until everything fits.
    std::vector<bool> capped(total, false);
    for (size_t round = 0; round <= total; ++round) {
        double fixed = 0.0, free_sum = 0.0;
        for (size_t i = 0; i < total; ++i) {
            (capped[i] ? fixed : free_sum) += capped[i] ? 1.0 : w[i];
        }
        const double remaining = mass - fixed;
        const double scale     = free_sum > 0.0 ? remaining / free_sum : 0.0;
        bool         overflow  = false;
        for (size_t i = 0; i < total; ++i) {
            if (!capped[i] && w[i] * scale > 1.0) {
                capped[i] = true;
                overflow  = true;
            }
        }
        if (!overflow) {
            for (size_t i = 0; i < total; ++i) {
                w[i] = capped[i] ? 1.0 : w[i] * scale;
            }
            break;
        }
    }
    SuppressionMap map(reference.num_layers(), reference.num_heads());
    for (size_t i = 0; i < total; ++i) {
        map.set({static_cast<uint32_t>(i / reference.num_heads()), static_cast<uint32_t>(i % reference.num_heads())},
                static_cast<float>(std::clamp(w[i], 0.0, 1.0)));
    }
    return map;
}

namespace {

json top_json(const std::vector<TopEntry> & top) {
    json arr = json::array();
    for (const TopEntry & e : top) {
        arr.push_back(json::array({e.token, e.logit}));
    }
    return arr;
}

} // namespace

void write_trace_jsonl(const DecodeTrace & trace, std::ostream & out) {
    for (size_t i = 0; i < trace.steps.size(); ++i) {
        const DecodeStep & s = trace.steps[i];
        json line{{"step", i},
                  {"method", trace.method},
                  {"chosen", s.chosen},
                  {"pref_top", top_json(s.pref_top)},
                  {"gen_top", top_json(s.gen_top)},
                  {"combined_top", top_json(s.combined_top)}};
        out << line.dump() << "\n";
    }
}

void write_trace_jsonl(const DecodeTrace & trace, const std::filesystem::path & path) {
    std::ofstream out(path);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    write_trace_jsonl(trace, out);
}

} // namespace dps
