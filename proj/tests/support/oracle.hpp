#pragma once

// Test-only reference implementation: a straight-line double-precision
// forward pass written directly from the architecture definition, sharing no
// code with the library.

#include "dps/model.hpp"
#include "dps/rng.hpp"
#include "dps/synth.hpp"
#include "dps/tokenizer.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline std::vector<double> param(const dps::ModelCheckpoint & ck, const std::string & name) {
    auto t = ck.tensor(name);
    return std::vector<double>(t.begin(), t.end());
}

// y = W x + b with W stored [out, in].
inline std::vector<double> affine(const std::vector<double> & W, const std::vector<double> & b,
                                  const std::vector<double> & x) {
    const size_t out = b.size(), in = x.size();
    std::vector<double> y(out);
    for (size_t o = 0; o < out; ++o) {
        double s = b[o];
        for (size_t i = 0; i < in; ++i) {
            s += W[o * in + i] * x[i];
        }
        y[o] = s;
    }
    return y;
}

inline std::vector<double> layer_norm(const std::vector<double> & x, const std::vector<double> & g,
                                      const std::vector<double> & b) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    const double r = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * r * g[i] + b[i];
    return y;
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Logits for every position. `suppress` is layer-major, one entry per head.
inline Mat forward(const dps::ModelCheckpoint & ck, const std::vector<dps::TokenId> & ids,
                   const std::vector<double> & suppress = {}, size_t mask_start = 0) {
    const auto & c  = ck.config();
    const size_t T  = ids.size(), D = c.d_model, H = c.num_heads, dh = c.d_head;
    const auto   te = param(ck, "tok_emb"), pe = param(ck, "pos_emb");
    Mat          x(T, std::vector<double>(D));
    for (size_t t = 0; t < T; ++t)
        for (size_t i = 0; i < D; ++i) x[t][i] = te[ids[t] * D + i] + pe[t * D + i];

    for (size_t l = 0; l < c.num_layers; ++l) {
        const std::string p  = "layers." + std::to_string(l) + ".";
        const auto        g1 = param(ck, p + "ln1.weight"), b1 = param(ck, p + "ln1.bias");
        const auto        wq = param(ck, p + "attn.wq"), bq = param(ck, p + "attn.bq");
        const auto        wk = param(ck, p + "attn.wk"), bk = param(ck, p + "attn.bk");
        const auto        wv = param(ck, p + "attn.wv"), bv = param(ck, p + "attn.bv");
        const auto        wo = param(ck, p + "attn.wo"), bo = param(ck, p + "attn.bo");
        const auto        g2 = param(ck, p + "ln2.weight"), b2 = param(ck, p + "ln2.bias");
        const auto        w1 = param(ck, p + "ffn.w1"), fb1 = param(ck, p + "ffn.b1");
        const auto        w2 = param(ck, p + "ffn.w2"), fb2 = param(ck, p + "ffn.b2");

        Mat q(T), k(T), v(T);
        for (size_t t = 0; t < T; ++t) {
            const auto h = layer_norm(x[t], g1, b1);
            q[t]         = affine(wq, bq, h);
            k[t]         = affine(wk, bk, h);
            v[t]         = affine(wv, bv, h);
        }
        Mat xn = x;
        for (size_t t = 0; t < T; ++t) {
            std::vector<double> concat(D, 0.0);
            for (size_t j = 0; j < H; ++j) {
                std::vector<double> sc(t + 1);
                double              mx = -1e300;
                for (size_t s = 0; s <= t; ++s) {
                    double d = 0;
                    for (size_t i = 0; i < dh; ++i) d += q[t][j * dh + i] * k[s][j * dh + i];
                    sc[s] = d / std::sqrt(double(dh));
                    mx    = std::max(mx, sc[s]);
                }
                double z = 0;
                for (double & e : sc) z += (e = std::exp(e - mx));
                const double keep =
                    (!suppress.empty() && t >= mask_start) ? 1.0 - suppress[l * H + j] : 1.0;
                for (size_t s = 0; s <= t; ++s)
                    for (size_t i = 0; i < dh; ++i) concat[j * dh + i] += keep * sc[s] / z * v[s][j * dh + i];
            }
            const auto a = affine(wo, bo, concat);
            for (size_t i = 0; i < D; ++i) xn[t][i] += a[i];
        }
        for (size_t t = 0; t < T; ++t) {
            const auto          h  = layer_norm(xn[t], g2, b2);
            std::vector<double> hid = affine(w1, fb1, h);
            for (double & e : hid) e = gelu(e);
            const auto f = affine(w2, fb2, hid);
            for (size_t i = 0; i < D; ++i) xn[t][i] += f[i];
        }
        x = std::move(xn);
    }
    const auto gf = param(ck, "ln_f.weight"), bf = param(ck, "ln_f.bias");
    const auto lw = param(ck, "lm_head.weight"), lb = param(ck, "lm_head.bias");
    Mat        logits(T);
    for (size_t t = 0; t < T; ++t) logits[t] = affine(lw, lb, layer_norm(x[t], gf, bf));
    return logits;
}

// Mean -log p(target token) over target-role positions.
inline double target_nll(const dps::ModelCheckpoint & ck, const dps::TokenSequence & seq,
                         const std::vector<double> & suppress = {}) {
    const Mat logits = forward(ck, seq.ids, suppress);
    double    total  = 0;
    size_t    n      = 0;
    for (size_t t = 1; t < seq.size(); ++t) {
        if (seq.roles[t] != dps::TokenRole::target) continue;
        const auto & row = logits[t - 1];
        double       mx  = -1e300;
        for (double v : row) mx = std::max(mx, v);
        double z = 0;
        for (double v : row) z += std::exp(v - mx);
        total += mx + std::log(z) - row[seq.ids[t]];
        ++n;
    }
    return total / n;
}

} // namespace oracle

namespace fixtures {

// One-layer, two-head model (d_model 4) with weights set from fixed
// closed-form patterns. Vocabulary covers the special tokens and one user.
inline dps::ModelCheckpoint micro_model() {
    dps::ModelConfig c;
    c.num_layers  = 1;
    c.num_heads   = 2;
    c.d_head      = 2;
    c.d_model     = 4;
    c.d_ff        = 6;
    c.max_seq_len = 48;
    c.vocab_size  = dps::vocab_size_for_users(1);
    dps::ModelCheckpoint ck(c, {"u0"});
    for (const auto & spec : ck.manifest()) {
        auto         t    = ck.tensor(spec.name);
        const size_t salt = spec.offset % 97;
        for (size_t i = 0; i < t.size(); ++i) {
            t[i] = static_cast<float>(0.5 * std::sin(0.37 * double(i) + 0.11 * double(salt) + 0.5));
        }
        if (spec.name.find("ln") != std::string::npos && spec.name.find(".weight") != std::string::npos) {
            for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(1.0 + 0.1 * std::cos(double(i)));
        }
    }
    return ck;
}

// Random model with weights large enough that heads matter.
inline dps::ModelCheckpoint random_model(const dps::ModelConfig & config, std::vector<std::string> users,
                                         uint64_t seed, double scale = 0.3) {
    dps::ModelCheckpoint ck(config, std::move(users));
    dps::Rng             rng(seed);
    for (float & p : ck.params()) p = static_cast<float>(scale * rng.normal());
    for (const auto & spec : ck.manifest()) {
        if (spec.name.find("ln") != std::string::npos && spec.name.find(".weight") != std::string::npos) {
            for (float & p : ck.tensor(spec.name)) p = 1.0f + 0.1f * p;
        }
    }
    return ck;
}

inline dps::ModelConfig small_config(size_t num_users, uint32_t layers = 2, uint32_t heads = 2) {
    dps::ModelConfig c;
    c.num_layers  = layers;
    c.num_heads   = heads;
    c.d_head      = 4;
    c.d_model     = heads * 4;
    c.d_ff        = 16;
    c.max_seq_len = 48;
    c.vocab_size  = dps::vocab_size_for_users(num_users);
    return c;
}

inline dps::SynthParams small_synth() {
    dps::SynthParams p;
    p.num_clusters      = 2;
    p.users_per_cluster = 2;
    p.train_per_user    = 8;
    p.discover_per_user = 4;
    p.eval_per_user     = 4;
    return p;
}

} // namespace fixtures
