#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dps {

using TokenId = int32_t;

struct ModelConfig {
    uint32_t num_layers  = 4;
    uint32_t num_heads   = 4;
    uint32_t d_model     = 32;
    uint32_t d_head      = 8;
    uint32_t d_ff        = 64;
    uint32_t vocab_size  = 286;
    uint32_t max_seq_len = 64;
    uint64_t seed        = 0;

    // Throws ErrorKind::config when an invariant is violated.
    void validate() const;

    size_t total_heads() const { return size_t{num_layers} * num_heads; }

    bool operator==(const ModelConfig &) const = default;
};

struct HeadId {
    uint32_t layer = 0;
    uint32_t head  = 0;

    auto operator<=>(const HeadId &) const = default;
};

// Per-head suppression strengths s in [0,1]. A head's attention output is
// scaled by (1 - s) right before the layer's output projection.
class SuppressionMap {
public:
    SuppressionMap() = default;
    SuppressionMap(uint32_t num_layers, uint32_t num_heads);

    static SuppressionMap zeros(const ModelConfig & config) {
        return SuppressionMap(config.num_layers, config.num_heads);
    }
    static SuppressionMap binary(const ModelConfig & config, std::span<const HeadId> heads);

    uint32_t num_layers() const { return num_layers_; }
    uint32_t num_heads() const { return num_heads_; }
    size_t   size() const { return weights_.size(); }

    float at(HeadId h) const { return weights_[index(h)]; }
    float at(uint32_t layer, uint32_t head) const { return weights_[size_t{layer} * num_heads_ + head]; }
    void  set(HeadId h, float s);

    std::span<const float> weights() const { return weights_; }

    bool   matches(const ModelConfig & config) const;
    bool   is_zero() const;
    double l1_mass() const;

    bool operator==(const SuppressionMap &) const = default;

private:
    size_t index(HeadId h) const;

    uint32_t           num_layers_ = 0;
    uint32_t           num_heads_  = 0;
    std::vector<float> weights_;
};

enum class TokenRole : uint8_t { other, profile, input, target };

struct TokenSequence {
    std::vector<TokenId>   ids;
    std::vector<TokenRole> roles; // empty, or parallel to ids

    size_t size() const { return ids.size(); }
    bool   empty() const { return ids.empty(); }
};

struct TensorSpec {
    std::string         name;
    std::vector<size_t> shape;
    size_t              offset = 0; // into the flat parameter buffer

    size_t numel() const;
};

// Ordered tensor manifest implied by a config. Linear weights are stored as
// [out, in] so "columns" of an output projection index its input features.
std::vector<TensorSpec> standard_manifest(const ModelConfig & config);

// Transformer parameters: a config, the ordered manifest, and one flat
// row-major buffer holding every tensor back to back in manifest order.
class ModelCheckpoint {
public:
    ModelCheckpoint() = default;
    // Zero-filled parameters laid out per standard_manifest(config).
    explicit ModelCheckpoint(const ModelConfig & config, std::vector<std::string> user_vocab = {});

    const ModelConfig &              config() const { return config_; }
    const std::vector<TensorSpec> &  manifest() const { return manifest_; }
    const std::vector<std::string> & user_vocab() const { return user_vocab_; }

    std::span<float>       params() { return params_; }
    std::span<const float> params() const { return params_; }

    std::span<float>       tensor(std::string_view name);
    std::span<const float> tensor(std::string_view name) const;
    const TensorSpec &     spec(std::string_view name) const;

    // FNV-1a over config, manifest and raw parameter bytes.
    uint64_t fingerprint() const;

    // Bitwise comparison of config, vocab and parameters.
    bool operator==(const ModelCheckpoint & other) const;

private:
    ModelConfig              config_;
    std::vector<TensorSpec>  manifest_;
    std::vector<std::string> user_vocab_;
    std::vector<float>       params_;
};

// Seeded initialization: N(0, 0.02) for weights and embeddings, with the
// residual projections (attn.wo, ffn.w2) scaled to 0.02/sqrt(2*num_layers);
// biases zero, layer-norm gains one.
ModelCheckpoint init_checkpoint(const ModelConfig & config, std::vector<std::string> user_vocab = {});

std::string fingerprint_hex(uint64_t fingerprint);

} // namespace dps
