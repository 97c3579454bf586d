#pragma once

// Internal numeric kernels shared by inference and training. All reductions
// run in a fixed order so results are bit-reproducible.

#include <cmath>
#include <cstddef>

namespace dps::kernels {

inline float dot(const float * a, const float * b, size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (size_t j = 0; j < 8; ++j) {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    float tail = 0.0f;
    for (; i < n; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

// y += alpha * x
inline void axpy(float * y, float alpha, const float * x, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

// out[r] = bias[r] + W[r, :] . x for a row-major [rows, cols] weight.
inline void linear(float * out, const float * w, const float * bias, const float * x, size_t rows, size_t cols) {
    for (size_t r = 0; r < rows; ++r) {
        out[r] = (bias ? bias[r] : 0.0f) + dot(w + r * cols, x, cols);
    }
}

inline constexpr float kLayerNormEps = 1e-5f;

// Writes normalized output; returns mean and reciprocal std via out params.
inline void layer_norm(float * out, const float * x, const float * gain, const float * bias, size_t n,
                       float * mean_out = nullptr, float * rstd_out = nullptr) {
    float mean = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        mean += x[i];
    }
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        const float d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<float>(n);
    const float rstd = 1.0f / std::sqrt(var + kLayerNormEps);
    for (size_t i = 0; i < n; ++i) {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    if (mean_out) {
        *mean_out = mean;
    }
    if (rstd_out) {
        *rstd_out = rstd;
    }
}

inline constexpr float kGeluC = 0.7978845608028654f; // sqrt(2/pi)

inline float gelu(float x) {
    const float u = kGeluC * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad(float x) {
    const float u  = kGeluC * (x + 0.044715f * x * x * x);
    const float th = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
}

} // namespace dps::kernels
