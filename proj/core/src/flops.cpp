#include "dps/flops.hpp"

#include "dps/error.hpp"

#include <string>

namespace dps {

void FlopsModel::validate() const {
    if (!(num_params_effective > 0.0) || hidden_size == 0 || num_layers == 0 || num_heads == 0 || d_head == 0) {
        fail(ErrorKind::config, "flops model: all counts must be positive");
    }
}

FlopsModel FlopsModel::llama3_8b_like() {
    FlopsModel m;
    m.num_params_effective = 7.0e9;
    m.hidden_size          = 4096;
    m.num_layers           = 32;
    m.num_heads            = 32;
    m.d_head               = 128;
    return m;
}

double flops_per_token(const FlopsModel & model, uint64_t context_len) {
    double f = 2.0 * model.num_params_effective;
    if (model.counts_attention_quadratic) {
        f += 2.0 * static_cast<double>(model.num_layers) *
             (2.0 * static_cast<double>(context_len) * static_cast<double>(model.hidden_size));
    }
    return f;
}

namespace {

// Sum of per-token cost over contexts first..last. The attention term is an
// arithmetic series, so this is closed-form.
double range_flops(const FlopsModel & model, uint64_t first, uint64_t last) {
    const double n = static_cast<double>(last - first + 1);
    double       f = n * 2.0 * model.num_params_effective;
    if (model.counts_attention_quadratic) {
        const double ctx_sum = n * (static_cast<double>(first) + static_cast<double>(last)) / 2.0;
        f += 4.0 * static_cast<double>(model.num_layers) * static_cast<double>(model.hidden_size) * ctx_sum;
    }
    return f;
}

} // namespace

FlopsEstimate estimate_flops(const FlopsModel & model, uint64_t prompt_len, uint64_t gen_len, unsigned passes) {
    model.validate();
    if (prompt_len < 1 || gen_len < 1) {
        fail(ErrorKind::input, "estimate_flops: prompt and generation lengths must be >= 1");
    }
    if (passes != 1 && passes != 2) {
        fail(ErrorKind::input, "estimate_flops: passes must be 1 or 2, got " + std::to_string(passes));
    }
    FlopsEstimate e;
    e.prefill = range_flops(model, 1, prompt_len) * 1e-12;
    e.decode  = static_cast<double>(passes) * range_flops(model, prompt_len + 1, prompt_len + gen_len) * 1e-12;
    e.total   = e.prefill + e.decode;
    return e;
}

FlopsModel calibrate_flops(FlopsModel model, uint64_t prompt_len, uint64_t gen_len, double target_tflop) {
    if (prompt_len < 1 || gen_len < 1) {
        fail(ErrorKind::input, "calibrate_flops: prompt and generation lengths must be >= 1");
    }
    // total = 2 N (P + T) + A with A the attention part; solve for N.
    FlopsModel probe          = model;
    probe.num_params_effective = 0.0;
    const double attention    = range_flops(probe, 1, prompt_len + gen_len);
    const double remaining    = target_tflop * 1e12 - attention;
    if (!(remaining > 0.0)) {
        fail(ErrorKind::input, "calibrate_flops: target is below the attention cost alone");
    }
    model.num_params_effective = remaining / (2.0 * static_cast<double>(prompt_len + gen_len));
    return model;
}

} // namespace dps
