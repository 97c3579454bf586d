#include "dps/model.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>

namespace dps {

void ModelConfig::validate() const {
    if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_head < 1 || d_ff < 1 || vocab_size < 1) {
        fail(ErrorKind::config, "model config: all counts must be >= 1");
    }
    if (max_seq_len < 2) {
        fail(ErrorKind::config, "model config: max_seq_len must be >= 2");
    }
    if (d_model != num_heads * d_head) {
        fail(ErrorKind::config, "model config: d_model (" + std::to_string(d_model) + ") != num_heads * d_head (" +
                                    std::to_string(num_heads) + " * " + std::to_string(d_head) + ")");
    }
}

SuppressionMap::SuppressionMap(uint32_t num_layers, uint32_t num_heads)
    : num_layers_(num_layers), num_heads_(num_heads), weights_(size_t{num_layers} * num_heads, 0.0f) {}

SuppressionMap SuppressionMap::binary(const ModelConfig & config, std::span<const HeadId> heads) {
    SuppressionMap map = zeros(config);
    for (const HeadId & h : heads) {
        map.set(h, 1.0f);
    }
    return map;
}

size_t SuppressionMap::index(HeadId h) const {
    if (h.layer >= num_layers_ || h.head >= num_heads_) {
        fail(ErrorKind::config, "head (" + std::to_string(h.layer) + "," + std::to_string(h.head) +
                                    ") outside suppression map " + std::to_string(num_layers_) + "x" +
                                    std::to_string(num_heads_));
    }
    return size_t{h.layer} * num_heads_ + h.head;
}

void SuppressionMap::set(HeadId h, float s) {
    if (!(s >= 0.0f && s <= 1.0f)) {
        fail(ErrorKind::input, "suppression strength must lie in [0,1]");
    }
    weights_[index(h)] = s;
}

bool SuppressionMap::matches(const ModelConfig & config) const {
    return num_layers_ == config.num_layers && num_heads_ == config.num_heads;
}

bool SuppressionMap::is_zero() const {
    return std::all_of(weights_.begin(), weights_.end(), [](float s) { return s == 0.0f; });
}

double SuppressionMap::l1_mass() const {
    double total = 0.0;
    for (float s : weights_) {
        total += s;
    }
    return total;
}

size_t TensorSpec::numel() const {
    size_t n = 1;
    for (size_t d : shape) {
        n *= d;
    }
    return n;
}

std::vector<TensorSpec> standard_manifest(const ModelConfig & config) {
    config.validate();
    const size_t D = config.d_model;
    const size_t F = config.d_ff;
    const size_t V = config.vocab_size;
    const size_t S = config.max_seq_len;

    std::vector<TensorSpec> specs;
    size_t offset = 0;
    auto add = [&](std::string name, std::vector<size_t> shape) {
        TensorSpec spec{std::move(name), std::move(shape), offset};
        offset += spec.numel();
        specs.push_back(std::move(spec));
    };

    add("tok_emb", {V, D});
    add("pos_emb", {S, D});
    for (uint32_t l = 0; l < config.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        add(p + "ln1.weight", {D});
        add(p + "ln1.bias", {D});
        add(p + "attn.wq", {D, D});
        add(p + "attn.bq", {D});
        add(p + "attn.wk", {D, D});
        add(p + "attn.bk", {D});
        add(p + "attn.wv", {D, D});
        add(p + "attn.bv", {D});
        add(p + "attn.wo", {D, D});
        add(p + "attn.bo", {D});
        add(p + "ln2.weight", {D});
        add(p + "ln2.bias", {D});
        add(p + "ffn.w1", {F, D});
        add(p + "ffn.b1", {F});
        add(p + "ffn.w2", {D, F});
        add(p + "ffn.b2", {D});
    }
    add("ln_f.weight", {D});
    add("ln_f.bias", {D});
    add("lm_head.weight", {V, D});
    add("lm_head.bias", {V});
    return specs;
}

ModelCheckpoint::ModelCheckpoint(const ModelConfig & config, std::vector<std::string> user_vocab)
    : config_(config), manifest_(standard_manifest(config)), user_vocab_(std::move(user_vocab)) {
    const TensorSpec & last = manifest_.back();
    params_.assign(last.offset + last.numel(), 0.0f);
}

const TensorSpec & ModelCheckpoint::spec(std::string_view name) const {
    for (const TensorSpec & s : manifest_) {
        if (s.name == name) {
            return s;
        }
    }
    fail(ErrorKind::config, "no tensor named '" + std::string(name) + "'");
}

std::span<float> ModelCheckpoint::tensor(std::string_view name) {
    const TensorSpec & s = spec(name);
    return std::span<float>(params_).subspan(s.offset, s.numel());
}

std::span<const float> ModelCheckpoint::tensor(std::string_view name) const {
    const TensorSpec & s = spec(name);
    return std::span<const float>(params_).subspan(s.offset, s.numel());
}

namespace {

struct Fnv1a {
    uint64_t h = 0xcbf29ce484222325ULL;

    void bytes(const void * data, size_t n) {
        const auto * p = static_cast<const unsigned char *>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    }
    void u64(uint64_t v) { bytes(&v, sizeof v); }
    void str(std::string_view s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
};

} // namespace

uint64_t ModelCheckpoint::fingerprint() const {
    Fnv1a f;
    const ModelConfig & c = config_;
    for (uint64_t v : {uint64_t{c.num_layers}, uint64_t{c.num_heads}, uint64_t{c.d_model}, uint64_t{c.d_head},
                       uint64_t{c.d_ff}, uint64_t{c.vocab_size}, uint64_t{c.max_seq_len}, c.seed}) {
        f.u64(v);
    }
    for (const TensorSpec & s : manifest_) {
        f.str(s.name);
        for (size_t d : s.shape) {
            f.u64(d);
        }
    }
    for (const std::string & u : user_vocab_) {
        f.str(u);
    }
    f.bytes(params_.data(), params_.size() * sizeof(float));
    return f.h;
}

bool ModelCheckpoint::operator==(const ModelCheckpoint & other) const {
    if (!(config_ == other.config_) || user_vocab_ != other.user_vocab_ || params_.size() != other.params_.size()) {
        return false;
    }
    if (manifest_.size() != other.manifest_.size()) {
        return false;
    }
    for (size_t i = 0; i < manifest_.size(); ++i) {
        if (manifest_[i].name != other.manifest_[i].name || manifest_[i].shape != other.manifest_[i].shape) {
            return false;
        }
    }
    return std::memcmp(params_.data(), other.params_.data(), params_.size() * sizeof(float)) == 0;
}

ModelCheckpoint init_checkpoint(const ModelConfig & config, std::vector<std::string> user_vocab) {
    ModelCheckpoint ckpt(config, std::move(user_vocab));
    Rng rng(derive_seed(config.seed, "init"));

    const float base_std     = 0.02f;
    const float residual_std = base_std / std::sqrt(2.0f * static_cast<float>(config.num_layers));

    auto ends_with = [](std::string_view s, std::string_view suffix) {
        return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
    };

    for (const TensorSpec & spec : ckpt.manifest()) {
        std::span<float> t = ckpt.params().subspan(spec.offset, spec.numel());
        const std::string_view name = spec.name;
        if (ends_with(name, ".weight") && spec.shape.size() == 1) {
            std::fill(t.begin(), t.end(), 1.0f); // layer-norm gain
        } else if (spec.shape.size() == 1) {
            std::fill(t.begin(), t.end(), 0.0f); // bias
        } else {
            const float std_dev = (ends_with(name, "attn.wo") || ends_with(name, "ffn.w2")) ? residual_std : base_std;
            for (float & v : t) {
                v = static_cast<float>(rng.normal()) * std_dev;
            }
        }
    }
    return ckpt;
}

std::string fingerprint_hex(uint64_t fingerprint) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint));
    return buf;
}

} // namespace dps
