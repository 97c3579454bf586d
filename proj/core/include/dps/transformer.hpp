#pragma once

#include "dps/example.hpp"
#include "dps/model.hpp"

#include <span>
#include <vector>

namespace dps {

// Row-major [rows, cols] float matrix (one row per sequence position).
struct Matrix {
    size_t             rows = 0;
    size_t             cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    std::span<float>       row(size_t r) { return std::span<float>(data).subspan(r * cols, cols); }
    std::span<const float> row(size_t r) const { return std::span<const float>(data).subspan(r * cols, cols); }

    bool operator==(const Matrix &) const = default;
};

enum class MaskScope { all_positions, decode_only };

struct ForwardOptions {
    const SuppressionMap * suppression = nullptr; // null means no suppression
    size_t                 mask_start  = 0;       // suppression applies at positions >= mask_start
    size_t                 logits_from = 0;       // logits produced for positions >= logits_from
    bool                   want_hidden = false;   // keep final-layer-norm hidden states
};

struct ForwardResult {
    size_t logits_from = 0;
    Matrix logits; // rows: positions logits_from .. seq_len-1
    Matrix hidden; // rows: all positions, only when requested

    std::span<const float> logits_at(size_t position) const { return logits.row(position - logits_from); }
};

// Residual stream entering each layer, captured once so head ablations in
// layer l can restart from layer l instead of recomputing from the embeddings.
struct ResidualTrace {
    size_t             seq_len = 0;
    std::vector<Matrix> layer_inputs;
};

// Pre-LN decoder-only transformer evaluated from a checkpoint. Holds a
// reference to the checkpoint, which must outlive it. Stateless otherwise,
// so one instance can be shared across threads.
class Transformer {
public:
    explicit Transformer(const ModelCheckpoint & checkpoint);

    const ModelConfig &     config() const { return ckpt_->config(); }
    const ModelCheckpoint & checkpoint() const { return *ckpt_; }

    ForwardResult forward(std::span<const TokenId> ids, const ForwardOptions & options = {}) const;
    ForwardResult forward(std::span<const TokenId> ids, const ForwardOptions & options, ResidualTrace & record) const;

    // Resumes from a recorded residual at the input of `layer`. The
    // suppression map must be zero on every earlier layer.
    ForwardResult forward_from(const ResidualTrace & trace, uint32_t layer, const ForwardOptions & options) const;

private:
    ForwardResult run(std::span<const TokenId> ids, const ForwardOptions & options, uint32_t first_layer,
                      const Matrix * start, ResidualTrace * record, size_t seq_len) const;

    const ModelCheckpoint * ckpt_;
};

// Per-position logits; logits at position t depend only on tokens <= t.
Matrix forward_logits(const ModelCheckpoint & checkpoint, const TokenSequence & tokens,
                      const SuppressionMap & suppression);
Matrix forward_logits(const ModelCheckpoint & checkpoint, const TokenSequence & tokens);

// Index of the first target-role token; throws ErrorKind::input when there is none.
size_t first_target_position(const TokenSequence & tokens);

// Mean negative log-likelihood of the target-role tokens given a forward
// result whose logits start at or before first_target_position - 1.
double target_nll(const TokenSequence & tokens, const ForwardResult & result);

double nll(const ModelCheckpoint & checkpoint, const TokenSequence & tokens, const SuppressionMap & suppression);
double nll(const ModelCheckpoint & checkpoint, const Example & example, const SuppressionMap & suppression);

// Numerically stable softmax / log-softmax (max subtraction, double accumulation).
std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0);
double              log_sum_exp(std::span<const float> logits);

} // namespace dps
