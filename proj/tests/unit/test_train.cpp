#include "oracle.hpp"

#include "dps/error.hpp"
#include "dps/train.hpp"
#include "dps/transformer.hpp"

#include <doctest.h>

#include <cmath>

using namespace dps;

namespace {

std::vector<Example> tiny_corpus() {
    return {{"a", {"xyz"}, "in", "abcab"}, {"b", {"pq"}, "go", "zzzy"}, {"a", {}, "q", "cabca"}};
}

} // namespace

TEST_CASE("analytic gradient matches finite differences of the oracle") {
    const ModelConfig          cfg = fixtures::small_config(2);
    ModelCheckpoint            ck  = fixtures::random_model(cfg, {"a", "b"}, 21, 0.2);
    const Tokenizer            tok({"a", "b"});
    std::vector<TokenSequence> batch;
    for (const Example & ex : tiny_corpus()) batch.push_back(tok.encode_example(ex, cfg.max_seq_len));

    const LossAndGrad lg = loss_and_grad(ck, batch);
    auto oracle_loss = [&](const ModelCheckpoint & m) {
        double s = 0;
        for (const auto & seq : batch) s += oracle::target_nll(m, seq);
        return s / batch.size();
    };
    CHECK(lg.loss == doctest::Approx(oracle_loss(ck)).epsilon(1e-5));

    // Probe a spread of parameters across every tensor.
    size_t checked = 0;
    for (const auto & spec : ck.manifest()) {
        for (size_t j = 0; j < 3; ++j) {
            const size_t idx = spec.offset + (j * 7919) % spec.numel();
            const float  p0  = ck.params()[idx];
            const float  eps = 1e-2f;
            ck.params()[idx] = p0 + eps;
            const double up  = oracle_loss(ck);
            ck.params()[idx] = p0 - eps;
            const double dn  = oracle_loss(ck);
            ck.params()[idx] = p0;
            const double fd  = (up - dn) / ((p0 + eps) - (p0 - eps));
            const double g   = lg.grad[idx];
            CHECK_MESSAGE(std::abs(fd - g) <= 2e-3 * std::max(1.0, std::abs(fd)) + 1e-5,
                          spec.name << "[" << idx - spec.offset << "] fd=" << fd << " grad=" << g);
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("gradients do not depend on the thread count") {
    const ModelConfig          cfg = fixtures::small_config(2);
    const ModelCheckpoint      ck  = fixtures::random_model(cfg, {"a", "b"}, 22);
    const Tokenizer            tok({"a", "b"});
    std::vector<TokenSequence> batch;
    for (int r = 0; r < 3; ++r)
        for (const Example & ex : tiny_corpus()) batch.push_back(tok.encode_example(ex, cfg.max_seq_len));
    const auto one  = loss_and_grad(ck, batch, 1);
    const auto four = loss_and_grad(ck, batch, 4);
    CHECK(one.loss == four.loss);
    CHECK(one.grad == four.grad);
}

TEST_CASE("training lowers the loss and is deterministic") {
    ModelConfig cfg = fixtures::small_config(2);
    cfg.seed        = 3;
    std::vector<Example> corpus;
    for (int r = 0; r < 8; ++r)
        for (const Example & ex : tiny_corpus()) corpus.push_back(ex);
    TrainConfig hyper;
    hyper.steps      = 60;
    hyper.batch_size = 4;
    hyper.seed       = 9;
    std::vector<double> losses;
    hyper.on_step = [&](size_t, double loss) { losses.push_back(loss); };
    const auto a  = train(cfg, corpus, {"a", "b"}, hyper);
    REQUIRE(losses.size() == 60);
    CHECK(losses.back() < losses.front() - 1.0);
    hyper.on_step = nullptr;
    hyper.threads = 3;
    CHECK(train(cfg, corpus, {"a", "b"}, hyper) == a);
}

TEST_CASE("zero steps returns the initialization") {
    ModelConfig cfg = fixtures::small_config(2);
    TrainConfig hyper;
    hyper.steps = 0;
    CHECK(train(cfg, tiny_corpus(), {"a", "b"}, hyper) == init_checkpoint(cfg, {"a", "b"}));
}

TEST_CASE("divergence is reported with the step") {
    ModelConfig cfg = fixtures::small_config(2);
    TrainConfig hyper;
    hyper.steps         = 50;
    hyper.batch_size    = 2;
    hyper.learning_rate = 1e30;
    hyper.warmup_steps  = 0;
    hyper.grad_clip     = 0;
    try {
        train(cfg, tiny_corpus(), {"a", "b"}, hyper);
        FAIL("expected divergence");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::divergence);
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("train config validation") {
    TrainConfig hyper;
    hyper.batch_size = 0;
    CHECK_THROWS_AS(hyper.validate(), Error);
}
