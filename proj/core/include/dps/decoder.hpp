#pragma once

#include "dps/model.hpp"
#include "dps/rng.hpp"
#include "dps/transformer.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dps {

enum class Strategy { greedy, temperature, top_k };

std::string_view to_string(Strategy strategy);
Strategy         strategy_from_string(std::string_view name); // greedy | sample | temperature | top-k

struct DecodeConfig {
    double    gamma          = 1.0;
    size_t    max_new_tokens = 12;
    Strategy  strategy       = Strategy::greedy;
    double    temperature    = 1.0; // temperature and top-k strategies
    size_t    top_k          = 0;   // top-k strategy; 0 behaves like plain temperature sampling
    uint64_t  seed           = 0;
    MaskScope mask_scope     = MaskScope::all_positions;
    // When set, tokens whose personalized log-probability falls more than this
    // many nats below the personalized maximum are excluded before sampling.
    std::optional<double> plausibility_margin;
    size_t                trace_top_n = 5;

    void validate() const;
};

struct TopEntry {
    TokenId token = 0;
    float   logit = 0.0f;

    bool operator==(const TopEntry &) const = default;
};

struct DecodeStep {
    std::vector<TopEntry> pref_top;
    std::vector<TopEntry> gen_top; // empty for single-pass decoding
    std::vector<TopEntry> combined_top;
    TokenId               chosen = 0;
    std::vector<float>    combined; // full decoding logits of this step

    bool operator==(const DecodeStep &) const = default;
};

struct DecodeTrace {
    std::string             method;
    std::vector<DecodeStep> steps;
    std::vector<TokenId>    tokens; // emitted tokens; ends with EOS when decoding stopped early
    DecodeConfig            config;
};

// (1 + gamma) * pref - gamma * gen, evaluated as pref + gamma * (pref - gen)
// so that gamma == 0 or pref == gen returns pref exactly.
std::vector<float> combine_logits(std::span<const float> pref, std::span<const float> gen, double gamma);

// Two passes per step on the same growing context: the plain model (l_pref)
// and the model under `suppression` (l_gen).
DecodeTrace dps_decode(const ModelCheckpoint & checkpoint, const TokenSequence & context,
                       const SuppressionMap & suppression, const DecodeConfig & config);

DecodeTrace vanilla_decode(const ModelCheckpoint & checkpoint, const TokenSequence & context,
                           const DecodeConfig & config);

// Contrast of the same model on a context with and without the profile
// segment; generated tokens are appended to both.
DecodeTrace context_contrast_decode(const ModelCheckpoint & checkpoint, const TokenSequence & with_profile,
                                    const TokenSequence & without_profile, const DecodeConfig & config);

// Picks the next token from decoding logits per the config's strategy.
TokenId choose_token(std::span<const float> logits, const DecodeConfig & config, Rng & rng);

// Binary mask on k heads drawn uniformly without replacement.
SuppressionMap random_head_mask(uint32_t num_layers, uint32_t num_heads, size_t k, uint64_t seed);
// Dense random map with the same L1 mass as `reference`, each entry in [0,1].
SuppressionMap random_matched_mask(const SuppressionMap & reference, uint64_t seed);

void write_trace_jsonl(const DecodeTrace & trace, std::ostream & out);
void write_trace_jsonl(const DecodeTrace & trace, const std::filesystem::path & path);

} // namespace dps
