#pragma once

#include "dps/example.hpp"
#include "dps/model.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dps {

// Adam with linear warmup, cosine decay to min_lr_ratio * learning_rate and
// global-norm gradient clipping. Batches are drawn by walking a per-epoch
// shuffle of the corpus seeded from `seed`.
struct TrainConfig {
    size_t   steps         = 600;
    size_t   batch_size    = 16;
    double   learning_rate = 3e-3;
    size_t   warmup_steps  = 20;
    double   min_lr_ratio  = 0.1;
    double   beta1         = 0.9;
    double   beta2         = 0.999;
    double   adam_eps      = 1e-8;
    double   grad_clip     = 1.0; // <= 0 disables clipping
    uint64_t seed          = 0;
    size_t   threads       = 1;

    std::function<void(size_t step, double loss)> on_step; // called after every step

    void validate() const;
};

// Gradient of the batch-mean target NLL with respect to every parameter, laid
// out like checkpoint.params(). Exposed for finite-difference testing.
struct LossAndGrad {
    double             loss = 0.0;
    std::vector<float> grad;
};
LossAndGrad loss_and_grad(const ModelCheckpoint & checkpoint, std::span<const TokenSequence> batch,
                          size_t threads = 1);

// Trains from init_checkpoint(config, user_vocab). Throws ErrorKind::divergence
// naming the step when the loss becomes non-finite.
ModelCheckpoint train(const ModelConfig & config, std::span<const Example> corpus,
                      const std::vector<std::string> & user_vocab, const TrainConfig & hyper);

} // namespace dps
