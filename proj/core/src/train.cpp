#include "dps/train.hpp"

#include "dps/error.hpp"
#include "dps/rng.hpp"
#include "dps/tokenizer.hpp"
#include "kernels.hpp"
#include "weights.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

namespace dps {

namespace {

using detail::make_view;
using detail::WeightView;

struct LayerActs {
    std::vector<float> x_in, h1, q, k, v, probs, heads, x_mid, h2, pre, act;
    std::vector<float> mean1, rstd1, mean2, rstd2;
};

// Layer-norm backward for one row. Accumulates into dgain/dbias and adds the
// input gradient into dx.
void layer_norm_backward(float * dx, float * dgain, float * dbias, const float * dy, const float * x,
                         const float * gain, float mean, float rstd, size_t n) {
    float sum_dxhat = 0.0f, sum_dxhat_xhat = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        const float xhat = (x[i] - mean) * rstd;
        const float dxh  = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat;
    }
    const float inv_n = 1.0f / static_cast<float>(n);
    for (size_t i = 0; i < n; ++i) {
        const float xhat = (x[i] - mean) * rstd;
        const float dxh  = dy[i] * gain[i];
        dx[i] += rstd * (dxh - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
    }
}

// dx += W^T dy for a row-major [rows, cols] weight; dW += dy (x) x; db += dy.
void linear_backward(float * dx, float * dw, float * db, const float * dy, const float * w, const float * x,
                     size_t rows, size_t cols) {
    for (size_t r = 0; r < rows; ++r) {
        const float g = dy[r];
        if (db) {
            db[r] += g;
        }
        if (g == 0.0f) {
            continue;
        }
        kernels::axpy(dw + r * cols, g, x, cols);
        if (dx) {
            kernels::axpy(dx, g, w + r * cols, cols);
        }
    }
}

// Forward with full activation storage, then backward. Gradients (scaled by
// loss_scale) are added into `g`. Returns the example's mean target NLL.
double example_loss_and_grad(const ModelConfig & c, const WeightView<const float> & w, const TokenSequence & seq,
                             float loss_scale, const WeightView<float> & g) {
    const size_t T  = seq.size();
    const size_t D  = c.d_model;
    const size_t H  = c.num_heads;
    const size_t dh = c.d_head;
    const size_t F  = c.d_ff;
    const size_t V  = c.vocab_size;
    const size_t L  = c.num_layers;
    const float  scale = 1.0f / std::sqrt(static_cast<float>(dh));

    std::vector<float> x(T * D);
    for (size_t t = 0; t < T; ++t) {
        const float * te = w.tok_emb + static_cast<size_t>(seq.ids[t]) * D;
        const float * pe = w.pos_emb + t * D;
        for (size_t i = 0; i < D; ++i) {
            x[t * D + i] = te[i] + pe[i];
        }
    }

    std::vector<LayerActs> acts(L);
    for (size_t l = 0; l < L; ++l) {
        const auto & W = w.layers[l];
        LayerActs &  a = acts[l];
        a.x_in = x;
        a.h1.assign(T * D, 0.0f);
        a.q.assign(T * D, 0.0f);
        a.k.assign(T * D, 0.0f);
        a.v.assign(T * D, 0.0f);
        a.mean1.assign(T, 0.0f);
        a.rstd1.assign(T, 0.0f);
        for (size_t t = 0; t < T; ++t) {
            float * h = a.h1.data() + t * D;
            kernels::layer_norm(h, x.data() + t * D, W.ln1_w, W.ln1_b, D, &a.mean1[t], &a.rstd1[t]);
            kernels::linear(a.q.data() + t * D, W.wq, W.bq, h, D, D);
            kernels::linear(a.k.data() + t * D, W.wk, W.bk, h, D, D);
            kernels::linear(a.v.data() + t * D, W.wv, W.bv, h, D, D);
        }
        a.probs.assign(H * T * T, 0.0f);
        a.heads.assign(T * D, 0.0f);
        for (size_t t = 0; t < T; ++t) {
            for (size_t hh = 0; hh < H; ++hh) {
                float *       p  = a.probs.data() + (hh * T + t) * T;
                const float * qt = a.q.data() + t * D + hh * dh;
                float         mx = -std::numeric_limits<float>::infinity();
                for (size_t j = 0; j <= t; ++j) {
                    p[j] = kernels::dot(qt, a.k.data() + j * D + hh * dh, dh) * scale;
                    mx   = std::max(mx, p[j]);
                }
                float denom = 0.0f;
                for (size_t j = 0; j <= t; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    denom += p[j];
                }
                float * out = a.heads.data() + t * D + hh * dh;
                for (size_t j = 0; j <= t; ++j) {
                    p[j] /= denom;
                    kernels::axpy(out, p[j], a.v.data() + j * D + hh * dh, dh);
                }
            }
        }
        std::vector<float> proj(std::max(D, F));
        for (size_t t = 0; t < T; ++t) {
            kernels::linear(proj.data(), W.wo, W.bo, a.heads.data() + t * D, D, D);
            for (size_t i = 0; i < D; ++i) {
                x[t * D + i] += proj[i];
            }
        }
        a.x_mid = x;
        a.h2.assign(T * D, 0.0f);
        a.pre.assign(T * F, 0.0f);
        a.act.assign(T * F, 0.0f);
        a.mean2.assign(T, 0.0f);
        a.rstd2.assign(T, 0.0f);
        for (size_t t = 0; t < T; ++t) {
            float * h = a.h2.data() + t * D;
            kernels::layer_norm(h, x.data() + t * D, W.ln2_w, W.ln2_b, D, &a.mean2[t], &a.rstd2[t]);
            kernels::linear(a.pre.data() + t * F, W.w1, W.b1, h, F, D);
            for (size_t i = 0; i < F; ++i) {
                a.act[t * F + i] = kernels::gelu(a.pre[t * F + i]);
            }
            kernels::linear(proj.data(), W.w2, W.b2, a.act.data() + t * F, D, F);
            for (size_t i = 0; i < D; ++i) {
                x[t * D + i] += proj[i];
            }
        }
    }

    // Final norm and loss over target predictions.
    std::vector<float> hf(T * D), meanf(T), rstdf(T);
    std::vector<float> dx(T * D, 0.0f);
    std::vector<float> logits(V), dh_row(D);
    double             total = 0.0;
    size_t             count = 0;
    for (size_t t = 1; t < T; ++t) {
        count += seq.roles[t] == TokenRole::target ? 1 : 0;
    }
    if (count == 0) {
        fail(ErrorKind::input, "training example has no target tokens");
    }
    const float dscale = loss_scale / static_cast<float>(count);
    for (size_t t = 0; t + 1 < T; ++t) {
        if (seq.roles[t + 1] != TokenRole::target) {
            continue;
        }
        float * h = hf.data() + t * D;
        kernels::layer_norm(h, x.data() + t * D, w.lnf_w, w.lnf_b, D, &meanf[t], &rstdf[t]);
        kernels::linear(logits.data(), w.lm_w, w.lm_b, h, V, D);
        float mx = -std::numeric_limits<float>::infinity();
        for (float z : logits) {
            mx = std::max(mx, z);
        }
        double sum = 0.0;
        for (float z : logits) {
            sum += std::exp(static_cast<double>(z) - mx);
        }
        const double lse    = mx + std::log(sum);
        const size_t target = static_cast<size_t>(seq.ids[t + 1]);
        total += lse - logits[target];

        // dlogits = (softmax - onehot) * dscale
        for (size_t vi = 0; vi < V; ++vi) {
            logits[vi] = static_cast<float>(std::exp(static_cast<double>(logits[vi]) - lse)) * dscale;
        }
        logits[target] -= dscale;
        std::fill(dh_row.begin(), dh_row.end(), 0.0f);
        linear_backward(dh_row.data(), g.lm_w, g.lm_b, logits.data(), w.lm_w, h, V, D);
        layer_norm_backward(dx.data() + t * D, g.lnf_w, g.lnf_b, dh_row.data(), x.data() + t * D, w.lnf_w, meanf[t],
                            rstdf[t], D);
    }

    std::vector<float> dact(F), dpre(F), dhid(T * D), dheads(T * D), dq(T * D), dk(T * D), dv(T * D);
    for (size_t l = L; l-- > 0;) {
        const auto & W  = w.layers[l];
        const auto & G  = g.layers[l];
        LayerActs &  a  = acts[l];

        // Feed-forward block; dx is the gradient w.r.t. the block output.
        std::fill(dhid.begin(), dhid.end(), 0.0f);
        for (size_t t = 0; t < T; ++t) {
            const float * dy = dx.data() + t * D;
            std::fill(dact.begin(), dact.end(), 0.0f);
            linear_backward(dact.data(), G.w2, G.b2, dy, W.w2, a.act.data() + t * F, D, F);
            for (size_t i = 0; i < F; ++i) {
                dpre[i] = dact[i] * kernels::gelu_grad(a.pre[t * F + i]);
            }
            float * dht = dhid.data() + t * D;
            linear_backward(dht, G.w1, G.b1, dpre.data(), W.w1, a.h2.data() + t * D, F, D);
            layer_norm_backward(dx.data() + t * D, G.ln2_w, G.ln2_b, dht, a.x_mid.data() + t * D, W.ln2_w,
                                a.mean2[t], a.rstd2[t], D);
        }

        // Attention block.
        std::fill(dheads.begin(), dheads.end(), 0.0f);
        for (size_t t = 0; t < T; ++t) {
            linear_backward(dheads.data() + t * D, G.wo, G.bo, dx.data() + t * D, W.wo, a.heads.data() + t * D, D, D);
        }
        std::fill(dq.begin(), dq.end(), 0.0f);
        std::fill(dk.begin(), dk.end(), 0.0f);
        std::fill(dv.begin(), dv.end(), 0.0f);
        std::vector<float> dp(T);
        for (size_t t = 0; t < T; ++t) {
            for (size_t hh = 0; hh < H; ++hh) {
                const float * p    = a.probs.data() + (hh * T + t) * T;
                const float * dout = dheads.data() + t * D + hh * dh;
                float         dot_pdp = 0.0f;
                for (size_t j = 0; j <= t; ++j) {
                    dp[j] = kernels::dot(dout, a.v.data() + j * D + hh * dh, dh);
                    kernels::axpy(dv.data() + j * D + hh * dh, p[j], dout, dh);
                    dot_pdp += p[j] * dp[j];
                }
                const float * qt  = a.q.data() + t * D + hh * dh;
                float *       dqt = dq.data() + t * D + hh * dh;
                for (size_t j = 0; j <= t; ++j) {
                    const float ds = p[j] * (dp[j] - dot_pdp) * scale;
                    if (ds == 0.0f) {
                        continue;
                    }
                    kernels::axpy(dqt, ds, a.k.data() + j * D + hh * dh, dh);
                    kernels::axpy(dk.data() + j * D + hh * dh, ds, qt, dh);
                }
            }
        }
        std::fill(dhid.begin(), dhid.end(), 0.0f);
        for (size_t t = 0; t < T; ++t) {
            float *       dht = dhid.data() + t * D;
            const float * ht  = a.h1.data() + t * D;
            linear_backward(dht, G.wq, G.bq, dq.data() + t * D, W.wq, ht, D, D);
            linear_backward(dht, G.wk, G.bk, dk.data() + t * D, W.wk, ht, D, D);
            linear_backward(dht, G.wv, G.bv, dv.data() + t * D, W.wv, ht, D, D);
            layer_norm_backward(dx.data() + t * D, G.ln1_w, G.ln1_b, dht, a.x_in.data() + t * D, W.ln1_w, a.mean1[t],
                                a.rstd1[t], D);
        }
    }

    for (size_t t = 0; t < T; ++t) {
        kernels::axpy(g.tok_emb + static_cast<size_t>(seq.ids[t]) * D, 1.0f, dx.data() + t * D, D);
        kernels::axpy(g.pos_emb + t * D, 1.0f, dx.data() + t * D, D);
    }
    return total / static_cast<double>(count);
}

} // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        fail(ErrorKind::input, "train: learning rate must be > 0");
    }
    if (batch_size < 1) {
        fail(ErrorKind::input, "train: batch size must be >= 1");
    }
    if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
        fail(ErrorKind::input, "train: min_lr_ratio must lie in [0,1]");
    }
}

LossAndGrad loss_and_grad(const ModelCheckpoint & checkpoint, std::span<const TokenSequence> batch, size_t threads) {
    const ModelConfig & c = checkpoint.config();
    if (batch.empty()) {
        fail(ErrorKind::input, "loss_and_grad: empty batch");
    }
    for (const TokenSequence & seq : batch) {
        if (seq.size() > c.max_seq_len) {
            fail(ErrorKind::length, "training sequence exceeds max_seq_len");
        }
    }
    const auto   w     = make_view<const float>(checkpoint.manifest(), checkpoint.params().data(), c.num_layers);
    const size_t P     = checkpoint.params().size();
    const size_t B     = batch.size();
    const float  scale = 1.0f / static_cast<float>(B);

    // One gradient buffer per example, reduced in example order, so the
    // result is independent of the thread count.
    std::vector<std::vector<float>> grads(B);
    std::vector<double>             losses(B);
    auto work = [&](size_t i) {
        grads[i].assign(P, 0.0f);
        const auto g = make_view<float>(checkpoint.manifest(), grads[i].data(), c.num_layers);
        losses[i]    = example_loss_and_grad(c, w, batch[i], scale, g);
    };
    const size_t nthreads = std::max<size_t>(1, std::min(threads, B));
    if (nthreads == 1) {
        for (size_t i = 0; i < B; ++i) {
            work(i);
        }
    } else {
        std::vector<std::thread> pool;
        for (size_t tid = 0; tid < nthreads; ++tid) {
            pool.emplace_back([&, tid] {
                for (size_t i = tid; i < B; i += nthreads) {
                    work(i);
                }
            });
        }
        for (auto & th : pool) {
            th.join();
        }
    }

    LossAndGrad out;
    out.grad.assign(P, 0.0f);
    for (size_t i = 0; i < B; ++i) {
        for (size_t p = 0; p < P; ++p) {
            out.grad[p] += grads[i][p];
        }
        out.loss += losses[i];
    }
    out.loss /= static_cast<double>(B);
    return out;
}

ModelCheckpoint train(const ModelConfig & config, std::span<const Example> corpus,
                      const std::vector<std::string> & user_vocab, const TrainConfig & hyper) {
    config.validate();
    hyper.validate();
    if (corpus.empty()) {
        fail(ErrorKind::input, "train: empty corpus");
    }
    ModelCheckpoint ckpt = init_checkpoint(config, user_vocab);
    if (hyper.steps == 0) {
        return ckpt;
    }

    const Tokenizer            tok = Tokenizer::for_checkpoint(ckpt);
    std::vector<TokenSequence> data;
    data.reserve(corpus.size());
    for (const Example & ex : corpus) {
        data.push_back(tok.encode_example(ex, config.max_seq_len));
    }

    const size_t        P = ckpt.params().size();
    std::vector<double> m(P, 0.0), v(P, 0.0);
    Rng                 rng(derive_seed(hyper.seed, "train.batches"));
    std::vector<size_t> order(data.size());
    size_t              cursor = order.size();
    std::vector<TokenSequence> batch(hyper.batch_size);

    for (size_t step = 0; step < hyper.steps; ++step) {
        for (size_t b = 0; b < hyper.batch_size; ++b) {
            if (cursor == order.size()) {
                for (size_t i = 0; i < order.size(); ++i) {
                    order[i] = i;
                }
                for (size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[rng.below(i)]);
                }
                cursor = 0;
            }
            batch[b] = data[order[cursor++]];
        }

        LossAndGrad lg = loss_and_grad(ckpt, batch, hyper.threads);
        if (!std::isfinite(lg.loss)) {
            fail(ErrorKind::divergence, "train: non-finite loss at step " + std::to_string(step));
        }

        double norm2 = 0.0;
        for (float gp : lg.grad) {
            norm2 += static_cast<double>(gp) * gp;
        }
        if (!std::isfinite(norm2)) {
            fail(ErrorKind::divergence, "train: non-finite gradient at step " + std::to_string(step));
        }
        const double norm = std::sqrt(norm2);
        const double clip = (hyper.grad_clip > 0.0 && norm > hyper.grad_clip) ? hyper.grad_clip / norm : 1.0;

        double lr = hyper.learning_rate;
        if (step < hyper.warmup_steps) {
            lr *= static_cast<double>(step + 1) / static_cast<double>(hyper.warmup_steps);
        } else if (hyper.steps > hyper.warmup_steps) {
            const double progress = static_cast<double>(step - hyper.warmup_steps) /
                                    static_cast<double>(hyper.steps - hyper.warmup_steps);
            lr *= hyper.min_lr_ratio + (1.0 - hyper.min_lr_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress));
        }
        const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step + 1));

        auto params = ckpt.params();
        for (size_t p = 0; p < P; ++p) {
            const double gp = lg.grad[p] * clip;
            m[p]            = hyper.beta1 * m[p] + (1.0 - hyper.beta1) * gp;
            v[p]            = hyper.beta2 * v[p] + (1.0 - hyper.beta2) * gp * gp;
            const double upd = lr * (m[p] / bc1) / (std::sqrt(v[p] / bc2) + hyper.adam_eps);
            params[p]        = static_cast<float>(params[p] - upd);
        }
        if (hyper.on_step) {
            hyper.on_step(step, lg.loss);
        }
    }
    return ckpt;
}

} // namespace dps
