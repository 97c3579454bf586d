#include "dps/transformer.hpp"

#include "dps/error.hpp"
#include "dps/tokenizer.hpp"
#include "kernels.hpp"
#include "weights.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dps {

namespace {

void check_inputs(const ModelConfig & config, std::span<const TokenId> ids, const ForwardOptions & options) {
    if (ids.empty()) {
        fail(ErrorKind::input, "forward: empty token sequence");
    }
    if (ids.size() > config.max_seq_len) {
        fail(ErrorKind::length, "forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                                    std::to_string(config.max_seq_len));
    }
    for (TokenId id : ids) {
        if (id < 0 || static_cast<uint32_t>(id) >= config.vocab_size) {
            fail(ErrorKind::input, "forward: token id " + std::to_string(id) + " outside vocabulary");
        }
    }
    if (options.suppression && !options.suppression->matches(config)) {
        fail(ErrorKind::config, "forward: suppression map shape does not match model config");
    }
    if (options.logits_from > ids.size()) {
        fail(ErrorKind::input, "forward: logits_from beyond sequence end");
    }
}

} // namespace

Transformer::Transformer(const ModelCheckpoint & checkpoint) : ckpt_(&checkpoint) {
    checkpoint.config().validate();
}

ForwardResult Transformer::forward(std::span<const TokenId> ids, const ForwardOptions & options) const {
    check_inputs(config(), ids, options);
    return run(ids, options, 0, nullptr, nullptr, ids.size());
}

ForwardResult Transformer::forward(std::span<const TokenId> ids, const ForwardOptions & options,
                                   ResidualTrace & record) const {
    check_inputs(config(), ids, options);
    return run(ids, options, 0, nullptr, &record, ids.size());
}

ForwardResult Transformer::forward_from(const ResidualTrace & trace, uint32_t layer,
                                        const ForwardOptions & options) const {
    const ModelConfig & c = config();
    if (layer >= c.num_layers || trace.layer_inputs.size() != c.num_layers) {
        fail(ErrorKind::config, "forward_from: layer out of range or trace from a different model");
    }
    if (options.suppression) {
        if (!options.suppression->matches(c)) {
            fail(ErrorKind::config, "forward: suppression map shape does not match model config");
        }
        for (uint32_t l = 0; l < layer; ++l) {
            for (uint32_t h = 0; h < c.num_heads; ++h) {
                if (options.suppression->at(l, h) != 0.0f) {
                    fail(ErrorKind::input, "forward_from: suppression on a layer before the resume point");
                }
            }
        }
    }
    return run({}, options, layer, &trace.layer_inputs[layer], nullptr, trace.seq_len);
}

ForwardResult Transformer::run(std::span<const TokenId> ids, const ForwardOptions & options, uint32_t first_layer,
                               const Matrix * start, ResidualTrace * record, size_t T) const {
    const ModelConfig & c = config();
    const size_t D  = c.d_model;
    const size_t H  = c.num_heads;
    const size_t dh = c.d_head;
    const size_t F  = c.d_ff;
    const size_t V  = c.vocab_size;
    const auto   w  = detail::make_view<const float>(ckpt_->manifest(), ckpt_->params().data(), c.num_layers);

    Matrix x(T, D);
    if (start) {
        x = *start;
    } else {
        for (size_t t = 0; t < T; ++t) {
            const float * te = w.tok_emb + static_cast<size_t>(ids[t]) * D;
            const float * pe = w.pos_emb + t * D;
            float *       xt = x.data.data() + t * D;
            for (size_t i = 0; i < D; ++i) {
                xt[i] = te[i] + pe[i];
            }
        }
    }
    if (record) {
        record->seq_len = T;
        record->layer_inputs.assign(c.num_layers, Matrix());
    }

    Matrix             hbuf(T, D), q(T, D), k(T, D), v(T, D), heads(T, D);
    std::vector<float> proj(std::max(D, F)), act(F), scores(T);
    const float        scale = 1.0f / std::sqrt(static_cast<float>(dh));

    for (uint32_t l = first_layer; l < c.num_layers; ++l) {
        const auto & L = w.layers[l];
        if (record) {
            record->layer_inputs[l] = x;
        }

        for (size_t t = 0; t < T; ++t) {
            float * ht = hbuf.data.data() + t * D;
            kernels::layer_norm(ht, x.data.data() + t * D, L.ln1_w, L.ln1_b, D);
            kernels::linear(q.data.data() + t * D, L.wq, L.bq, ht, D, D);
            kernels::linear(k.data.data() + t * D, L.wk, L.bk, ht, D, D);
            kernels::linear(v.data.data() + t * D, L.wv, L.bv, ht, D, D);
        }

        for (size_t t = 0; t < T; ++t) {
            for (size_t h = 0; h < H; ++h) {
                const float * qt = q.data.data() + t * D + h * dh;
                float         mx = -std::numeric_limits<float>::infinity();
                for (size_t j = 0; j <= t; ++j) {
                    scores[j] = kernels::dot(qt, k.data.data() + j * D + h * dh, dh) * scale;
                    mx        = std::max(mx, scores[j]);
                }
                float denom = 0.0f;
                for (size_t j = 0; j <= t; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    denom += scores[j];
                }
                float * out = heads.data.data() + t * D + h * dh;
                std::fill(out, out + dh, 0.0f);
                for (size_t j = 0; j <= t; ++j) {
                    kernels::axpy(out, scores[j] / denom, v.data.data() + j * D + h * dh, dh);
                }
                if (options.suppression && t >= options.mask_start) {
                    const float s = options.suppression->at(l, static_cast<uint32_t>(h));
                    if (s != 0.0f) {
                        const float keep = 1.0f - s;
                        for (size_t i = 0; i < dh; ++i) {
                            out[i] *= keep;
                        }
                    }
                }
            }
        }

        for (size_t t = 0; t < T; ++t) {
            float * xt = x.data.data() + t * D;
            kernels::linear(proj.data(), L.wo, L.bo, heads.data.data() + t * D, D, D);
            for (size_t i = 0; i < D; ++i) {
                xt[i] += proj[i];
            }
            float * ht = hbuf.data.data() + t * D;
            kernels::layer_norm(ht, xt, L.ln2_w, L.ln2_b, D);
            kernels::linear(act.data(), L.w1, L.b1, ht, F, D);
            for (size_t i = 0; i < F; ++i) {
                act[i] = kernels::gelu(act[i]);
            }
            kernels::linear(proj.data(), L.w2, L.b2, act.data(), D, F);
            for (size_t i = 0; i < D; ++i) {
                xt[i] += proj[i];
            }
        }
    }

    ForwardResult result;
    result.logits_from = options.logits_from;
    result.logits      = Matrix(T - options.logits_from, V);
    if (options.want_hidden) {
        result.hidden = Matrix(T, D);
    }
    std::vector<float> hf(D);
    const size_t       first_norm = options.want_hidden ? 0 : options.logits_from;
    for (size_t t = first_norm; t < T; ++t) {
        kernels::layer_norm(hf.data(), x.data.data() + t * D, w.lnf_w, w.lnf_b, D);
        if (options.want_hidden) {
            std::copy(hf.begin(), hf.end(), result.hidden.row(t).begin());
        }
        if (t >= options.logits_from) {
            kernels::linear(result.logits.row(t - options.logits_from).data(), w.lm_w, w.lm_b, hf.data(), V, D);
        }
    }
    return result;
}

Matrix forward_logits(const ModelCheckpoint & checkpoint, const TokenSequence & tokens,
                      const SuppressionMap & suppression) {
    ForwardOptions options;
    options.suppression = &suppression;
    return Transformer(checkpoint).forward(tokens.ids, options).logits;
}

Matrix forward_logits(const ModelCheckpoint & checkpoint, const TokenSequence & tokens) {
    return Transformer(checkpoint).forward(tokens.ids).logits;
}

size_t first_target_position(const TokenSequence & tokens) {
    for (size_t t = 1; t < tokens.roles.size(); ++t) {
        if (tokens.roles[t] == TokenRole::target) {
            return t;
        }
    }
    fail(ErrorKind::input, "sequence has no target-role tokens");
}

double log_sum_exp(std::span<const float> logits) {
    float mx = -std::numeric_limits<float>::infinity();
    for (float z : logits) {
        mx = std::max(mx, z);
    }
    double sum = 0.0;
    for (float z : logits) {
        sum += std::exp(static_cast<double>(z) - mx);
    }
    return mx + std::log(sum);
}

std::vector<double> softmax(std::span<const float> logits, double temperature) {
    float mx = -std::numeric_limits<float>::infinity();
    for (float z : logits) {
        mx = std::max(mx, z);
    }
    std::vector<double> p(logits.size());
    double              sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        sum += p[i];
    }
    for (double & x : p) {
        x /= sum;
    }
    return p;
}

double target_nll(const TokenSequence & tokens, const ForwardResult & result) {
    const size_t first = first_target_position(tokens);
    if (result.logits_from > first - 1) {
        fail(ErrorKind::input, "target_nll: logits start after the first target prediction");
    }
    double total = 0.0;
    size_t count = 0;
    for (size_t t = first; t < tokens.size(); ++t) {
        if (tokens.roles[t] != TokenRole::target) {
            continue;
        }
        const auto row = result.logits_at(t - 1);
        total += log_sum_exp(row) - row[static_cast<size_t>(tokens.ids[t])];
        ++count;
    }
    return total / static_cast<double>(count);
}

double nll(const ModelCheckpoint & checkpoint, const TokenSequence & tokens, const SuppressionMap & suppression) {
    ForwardOptions options;
    options.suppression = &suppression;
    options.logits_from = first_target_position(tokens) - 1;
    return target_nll(tokens, Transformer(checkpoint).forward(tokens.ids, options));
}

double nll(const ModelCheckpoint & checkpoint, const Example & example, const SuppressionMap & suppression) {
    const Tokenizer tok = Tokenizer::for_checkpoint(checkpoint);
    return nll(checkpoint, tok.encode_example(example, checkpoint.config().max_seq_len), suppression);
}

} // namespace dps
