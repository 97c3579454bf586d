#include "oracle.hpp"

#include "dps/error.hpp"
#include "dps/transformer.hpp"

#include <doctest.h>

#include <cmath>

using namespace dps;

namespace {

TokenSequence micro_sequence() {
    Example ex{"u0", {"ab", "cd"}, "xy", "hello"};
    return Tokenizer({"u0"}).encode_example(ex, 48);
}

double max_abs_diff(const Matrix & got, const oracle::Mat & want) {
    double worst = 0;
    for (size_t t = 0; t < want.size(); ++t)
        for (size_t v = 0; v < want[t].size(); ++v)
            worst = std::max(worst, std::abs(double(got.row(t)[v]) - want[t][v]));
    return worst;
}

} // namespace

TEST_CASE("micro model matches the straight-line oracle") {
    const ModelCheckpoint ck  = fixtures::micro_model();
    const TokenSequence   seq = micro_sequence();

    SUBCASE("no suppression") {
        CHECK(max_abs_diff(forward_logits(ck, seq), oracle::forward(ck, seq.ids)) < 1e-6);
    }
    SUBCASE("each head ablated") {
        for (uint32_t h = 0; h < 2; ++h) {
            SuppressionMap s = SuppressionMap::zeros(ck.config());
            s.set({0, h}, 1.0f);
            std::vector<double> w{0, 0};
            w[h] = 1.0;
            CHECK(max_abs_diff(forward_logits(ck, seq, s), oracle::forward(ck, seq.ids, w)) < 1e-6);
        }
    }
    SUBCASE("both heads, fractional strengths") {
        SuppressionMap s = SuppressionMap::zeros(ck.config());
        s.set({0, 0}, 0.25f);
        s.set({0, 1}, 0.75f);
        CHECK(max_abs_diff(forward_logits(ck, seq, s), oracle::forward(ck, seq.ids, {0.25, 0.75})) < 1e-6);
    }
    SUBCASE("suppression from a later position") {
        SuppressionMap s = SuppressionMap::zeros(ck.config());
        s.set({0, 1}, 1.0f);
        ForwardOptions o;
        o.suppression = &s;
        o.mask_start  = 5;
        const ForwardResult r = Transformer(ck).forward(seq.ids, o);
        CHECK(max_abs_diff(r.logits, oracle::forward(ck, seq.ids, {0, 1}, 5)) < 1e-6);
    }
}

TEST_CASE("zero suppression is bitwise identical to no suppression") {
    const auto ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 11);
    const auto seq = micro_sequence();
    CHECK(forward_logits(ck, seq, SuppressionMap::zeros(ck.config())) == forward_logits(ck, seq));
}

TEST_CASE("logits are causal") {
    const auto ck = fixtures::random_model(fixtures::small_config(1), {"u0"}, 12);
    auto       seq = micro_sequence();
    const auto base = forward_logits(ck, seq);
    for (size_t cut = 3; cut < seq.size(); cut += 4) {
        TokenSequence changed = seq;
        for (size_t t = cut; t < changed.size(); ++t) {
            changed.ids[t] = static_cast<TokenId>((changed.ids[t] + 7) % 256);
        }
        const auto other = forward_logits(ck, changed);
        for (size_t t = 0; t < cut; ++t) {
            CHECK(std::equal(base.row(t).begin(), base.row(t).end(), other.row(t).begin()));
        }
    }
}

TEST_CASE("resuming from a recorded residual matches a full forward") {
    const auto        ck = fixtures::random_model(fixtures::small_config(1, 3, 2), {"u0"}, 13);
    const auto        seq = micro_sequence();
    const Transformer model(ck);
    ResidualTrace     trace;
    ForwardOptions    base;
    base.logits_from = 4;
    model.forward(seq.ids, base, trace);
    for (uint32_t l = 0; l < 3; ++l) {
        for (uint32_t h = 0; h < 2; ++h) {
            SuppressionMap s = SuppressionMap::zeros(ck.config());
            s.set({l, h}, 1.0f);
            ForwardOptions o = base;
            o.suppression    = &s;
            CHECK(model.forward_from(trace, l, o).logits == model.forward(seq.ids, o).logits);
        }
    }
    SuppressionMap early = SuppressionMap::zeros(ck.config());
    early.set({0, 0}, 1.0f);
    ForwardOptions o = base;
    o.suppression    = &early;
    CHECK_THROWS_AS(model.forward_from(trace, 1, o), Error);
}

TEST_CASE("forward rejects bad inputs") {
    const auto ck = fixtures::micro_model();
    auto kind = [&](auto && fn) {
        try {
            fn();
        } catch (const Error & e) {
            return e.kind();
        }
        FAIL("expected an error");
        return ErrorKind::io;
    };
    CHECK(kind([&] { forward_logits(ck, TokenSequence{}); }) == ErrorKind::input);
    TokenSequence long_seq;
    long_seq.ids.assign(49, 1);
    CHECK(kind([&] { forward_logits(ck, long_seq); }) == ErrorKind::length);
    TokenSequence bad;
    bad.ids = {1, static_cast<TokenId>(ck.config().vocab_size)};
    CHECK(kind([&] { forward_logits(ck, bad); }) == ErrorKind::input);
    TokenSequence ok;
    ok.ids = {1, 2};
    CHECK(kind([&] { forward_logits(ck, ok, SuppressionMap(2, 2)); }) == ErrorKind::config);
}

TEST_CASE("target NLL agrees with the oracle") {
    const auto ck  = fixtures::micro_model();
    const auto seq = micro_sequence();
    CHECK(nll(ck, seq, SuppressionMap::zeros(ck.config())) == doctest::Approx(oracle::target_nll(ck, seq)).epsilon(1e-6));
}

TEST_CASE("softmax is stable and normalized") {
    const std::vector<float> big{1000.0f, 999.0f, -1000.0f};
    const auto               p = softmax(big);
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0));
    CHECK(p[0] / p[1] == doctest::Approx(std::exp(1.0)));
    CHECK(log_sum_exp(big) == doctest::Approx(1000.0 + std::log(1.0 + std::exp(-1.0))));
}
