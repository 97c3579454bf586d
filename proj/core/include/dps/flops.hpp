#pragma once

#include <cstddef>
#include <cstdint>

namespace dps {

// Inference cost model. Per generated or prefilled token at context length c:
//   2 * num_params_effective                       (one multiply-add per weight)
//   + 2 * num_layers * (2 * c * hidden_size)       (QK^T and AV, when enabled)
// Prefill sums over c = 1..prompt_len once. Decode sums over
// c = prompt_len+1..prompt_len+gen_len and is repeated `passes` times.
struct FlopsModel {
    double   num_params_effective = 0.0;
    uint64_t hidden_size          = 0;
    uint64_t num_layers           = 0;
    uint64_t num_heads            = 0;
    uint64_t d_head               = 0;
    bool     counts_attention_quadratic = true;

    void validate() const;

    // 32 layers, 32 heads of width 128, hidden 4096; ~7e9 effective parameters.
    static FlopsModel llama3_8b_like();
};

struct FlopsEstimate {
    double prefill = 0.0; // TFlop
    double decode  = 0.0; // TFlop, all passes
    double total   = 0.0;
};

double        flops_per_token(const FlopsModel & model, uint64_t context_len); // in FLOPs, not TFlop
FlopsEstimate estimate_flops(const FlopsModel & model, uint64_t prompt_len, uint64_t gen_len, unsigned passes);

// Returns `model` with num_params_effective set so that the single-pass total
// at (prompt_len, gen_len) equals target_tflop. Throws ErrorKind::input when
// the attention term alone already exceeds the target.
FlopsModel calibrate_flops(FlopsModel model, uint64_t prompt_len, uint64_t gen_len, double target_tflop);

} // namespace dps
