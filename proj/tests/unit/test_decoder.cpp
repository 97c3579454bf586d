#include "oracle.hpp"

#include "dps/decoder.hpp"
#include "dps/error.hpp"
#include "dps/tokenizer.hpp"

#include <doctest.h>

#include <set>
#include <sstream>

using namespace dps;

namespace {

TokenSequence context_for(const ModelCheckpoint & ck, const std::string & input = "hi") {
    const Tokenizer tok(ck.user_vocab());
    return tok.encode_context({ck.user_vocab().front(), {"abc", "de"}, input, ""}, ck.config().max_seq_len, true, 16);
}

size_t argmax(std::span<const float> v) {
    return static_cast<size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<float> last_row(const ModelCheckpoint & ck, const std::vector<TokenId> & ids, const SuppressionMap * s) {
    TokenSequence seq{ids, {}};
    const Matrix  m = s ? forward_logits(ck, seq, *s) : forward_logits(ck, seq);
    const auto    r = m.row(m.rows - 1);
    return {r.begin(), r.end()};
}

} // namespace

TEST_CASE("combination of a two-token example") {
    const std::vector<float> pref{2, 0}, gen{1, 1};
    const auto               c = combine_logits(pref, gen, 1.0);
    CHECK(c == std::vector<float>{3, -1});
    CHECK(argmax(c) == 0);
    DecodeConfig dc;
    Rng          rng(1);
    CHECK(choose_token(c, dc, rng) == 0);
}

TEST_CASE("combination identities") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> p(40), g(40);
        for (size_t i = 0; i < p.size(); ++i) {
            p[i] = static_cast<float>(5 * rng.normal());
            g[i] = static_cast<float>(5 * rng.normal());
        }
        CHECK(combine_logits(p, g, 0.0) == p);
        CHECK(combine_logits(p, p, 1.7) == p);
        const double gamma = 0.1 + 3 * rng.uniform();
        const auto   base  = combine_logits(p, g, gamma);
        auto         ps = p, gs = g;
        for (auto & x : ps) x += 4.0f;
        for (auto & x : gs) x += 4.0f;
        CHECK(argmax(combine_logits(ps, gs, gamma)) == argmax(base));
    }
}

TEST_CASE("gamma zero and empty suppression reproduce vanilla decoding bitwise") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 51);
    const auto   ctx = context_for(ck);
    DecodeConfig dc;
    dc.max_new_tokens = 10;
    dc.strategy       = Strategy::temperature;
    dc.seed           = 11;
    const auto van    = vanilla_decode(ck, ctx, dc);
    SuppressionMap s  = SuppressionMap::binary(ck.config(), std::vector<HeadId>{{0, 1}, {1, 0}});

    DecodeConfig zero = dc;
    zero.gamma        = 0.0;
    const auto a      = dps_decode(ck, ctx, s, zero);
    CHECK(a.tokens == van.tokens);
    REQUIRE(a.steps.size() == van.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].combined == van.steps[i].combined);

    const auto b = dps_decode(ck, ctx, SuppressionMap::zeros(ck.config()), dc);
    CHECK(b.tokens == van.tokens);
    for (size_t i = 0; i < b.steps.size(); ++i) CHECK(b.steps[i].combined == van.steps[i].combined);
}

TEST_CASE("decoding is deterministic for a fixed seed") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 52);
    const auto   ctx = context_for(ck);
    const auto   s   = SuppressionMap::binary(ck.config(), std::vector<HeadId>{{1, 1}});
    DecodeConfig dc;
    dc.strategy = Strategy::top_k;
    dc.top_k    = 5;
    dc.seed     = 99;
    const auto a = dps_decode(ck, ctx, s, dc);
    const auto b = dps_decode(ck, ctx, s, dc);
    CHECK(a.tokens == b.tokens);
    CHECK(a.steps == b.steps);
}

TEST_CASE("greedy vanilla decoding follows the oracle argmax chain") {
    const auto   ck  = fixtures::micro_model();
    const auto   ctx = context_for(ck);
    DecodeConfig dc;
    dc.max_new_tokens = 8;
    const auto trace  = vanilla_decode(ck, ctx, dc);

    std::vector<TokenId> ids = ctx.ids;
    for (TokenId tok : trace.tokens) {
        const auto   logits = oracle::forward(ck, ids);
        const auto & row    = logits.back();
        CHECK(size_t(std::max_element(row.begin(), row.end()) - row.begin()) == tok);
        ids.push_back(tok);
    }
}

TEST_CASE("each DPS step contrasts two passes on the same prefix") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 53);
    const auto   ctx = context_for(ck);
    const auto   s   = SuppressionMap::binary(ck.config(), std::vector<HeadId>{{0, 0}, {1, 1}});
    DecodeConfig dc;
    dc.gamma          = 0.75;
    dc.max_new_tokens = 6;
    const auto trace  = dps_decode(ck, ctx, s, dc);
    REQUIRE(!trace.steps.empty());
    std::vector<TokenId> ids = ctx.ids;
    for (const auto & step : trace.steps) {
        const auto pref = last_row(ck, ids, nullptr);
        const auto gen  = last_row(ck, ids, &s);
        CHECK(step.combined == combine_logits(pref, gen, 0.75));
        CHECK(step.chosen == argmax(step.combined));
        CHECK(step.gen_top.size() == dc.trace_top_n);
        ids.push_back(step.chosen);
    }
}

TEST_CASE("a single new token and the length limit") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 54);
    const auto   ctx = context_for(ck);
    DecodeConfig dc;
    dc.max_new_tokens = 1;
    const auto s      = SuppressionMap::zeros(ck.config());
    const auto t      = dps_decode(ck, ctx, s, dc);
    CHECK(t.steps.size() == 1);
    CHECK(t.tokens.size() == 1);

    dc.max_new_tokens = ck.config().max_seq_len;
    try {
        dps_decode(ck, ctx, s, dc);
        FAIL("expected a length error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::length);
    }
}

TEST_CASE("decoding stops at EOS") {
    auto ck = fixtures::random_model(fixtures::small_config(1), {"u0"}, 55);
    ck.tensor("lm_head.bias")[tokens::EOS] = 1e4f;
    DecodeConfig dc;
    dc.max_new_tokens = 10;
    const auto t      = vanilla_decode(ck, context_for(ck), dc);
    CHECK(t.tokens == std::vector<TokenId>{tokens::EOS});
}

TEST_CASE("top-k sampling stays inside the top k") {
    std::vector<float> logits{0.5f, 3.0f, 2.9f, -1.0f, 2.0f};
    DecodeConfig       dc;
    dc.strategy = Strategy::top_k;
    dc.top_k    = 2;
    Rng           rng(8);
    std::set<int> seen;
    for (int i = 0; i < 500; ++i) seen.insert(static_cast<int>(choose_token(logits, dc, rng)));
    CHECK(seen == std::set<int>{1, 2});
    dc.top_k = 1;
    for (int i = 0; i < 20; ++i) CHECK(choose_token(logits, dc, rng) == 1);
}

TEST_CASE("plausibility margin removes implausible tokens") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 58);
    const auto   s   = SuppressionMap::binary(ck.config(), std::vector<HeadId>{{0, 0}, {1, 1}});
    DecodeConfig dc;
    dc.strategy            = Strategy::temperature;
    dc.temperature         = 100.0;
    dc.gamma               = 2.0;
    dc.seed                = 4;
    dc.plausibility_margin = 0.0;
    const auto t           = dps_decode(ck, context_for(ck), s, dc);
    for (const auto & step : t.steps) CHECK(step.chosen == step.pref_top.front().token);
}

TEST_CASE("context contrast with identical contexts equals vanilla") {
    const auto   ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 56);
    const auto   ctx = context_for(ck);
    DecodeConfig dc;
    dc.max_new_tokens = 6;
    const auto a      = context_contrast_decode(ck, ctx, ctx, dc);
    const auto b      = vanilla_decode(ck, ctx, dc);
    CHECK(a.tokens == b.tokens);
    for (size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].combined == b.steps[i].combined);
}

TEST_CASE("decode-only scope leaves the prompt unsuppressed") {
    const auto     ck  = fixtures::random_model(fixtures::small_config(1), {"u0"}, 57);
    const auto     ctx = context_for(ck);
    const auto     s   = SuppressionMap::binary(ck.config(), std::vector<HeadId>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    DecodeConfig   dc;
    dc.max_new_tokens = 1;
    dc.mask_scope     = MaskScope::decode_only;
    const auto t      = dps_decode(ck, ctx, s, dc);
    std::vector<double> w(4, 1.0);
    const auto          orc  = oracle::forward(ck, ctx.ids, w, ctx.size() - 1).back();
    const auto          pref = last_row(ck, ctx.ids, nullptr);
    std::vector<float>  gen(orc.begin(), orc.end());
    const auto          expect = combine_logits(pref, gen, 1.0);
    for (size_t i = 0; i < expect.size(); ++i) CHECK(t.steps[0].combined[i] == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("random head masks") {
    CHECK(random_head_mask(4, 4, 0, 1).is_zero());
    const auto all = random_head_mask(4, 4, 16, 1);
    for (float w : all.weights()) CHECK(w == 1.0f);
    CHECK_THROWS_AS(random_head_mask(4, 4, 17, 1), Error);

    std::set<std::vector<float>> seen;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        const auto m = random_head_mask(4, 4, 4, seed);
        CHECK(m.l1_mass() == 4.0);
        seen.insert(std::vector<float>(m.weights().begin(), m.weights().end()));
    }
    // 1820 possible masks; a repeat among 100 draws is unlikely but legal, so
    // check coverage rather than strict uniqueness.
    CHECK(seen.size() >= 95);
    CHECK(random_head_mask(4, 4, 4, 3) == random_head_mask(4, 4, 4, 3));
}

TEST_CASE("random matched masks keep the reference mass") {
    ModelConfig c = fixtures::small_config(1, 4, 4);
    for (size_t k : {1, 3, 8, 15, 16}) {
        std::vector<HeadId> heads;
        for (size_t i = 0; i < k; ++i) heads.push_back({uint32_t(i / 4), uint32_t(i % 4)});
        const auto ref = SuppressionMap::binary(c, heads);
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const auto m = random_matched_mask(ref, seed);
            CHECK(m.l1_mass() == doctest::Approx(double(k)).epsilon(1e-5));
            for (float w : m.weights()) CHECK((w >= 0.0f && w <= 1.0f));
        }
    }
}

TEST_CASE("trace output has one line per step") {
    const auto   ck = fixtures::micro_model();
    DecodeConfig dc;
    dc.max_new_tokens = 3;
    const auto        t = dps_decode(ck, context_for(ck), SuppressionMap::zeros(ck.config()), dc);
    std::stringstream ss;
    write_trace_jsonl(t, ss);
    size_t      lines = 0;
    std::string line;
    while (std::getline(ss, line)) {
        ++lines;
        CHECK(line.find("\"combined_top\"") != std::string::npos);
    }
    CHECK(lines == t.steps.size());
}

TEST_CASE("config validation") {
    DecodeConfig dc;
    dc.temperature = 0.0;
    dc.strategy    = Strategy::temperature;
    CHECK_THROWS_AS(dc.validate(), Error);
    dc             = {};
    dc.gamma       = -1.0;
    CHECK_THROWS_AS(dc.validate(), Error);
    CHECK(strategy_from_string("sample") == Strategy::temperature);
    CHECK(strategy_from_string("top-k") == Strategy::top_k);
    CHECK_THROWS_AS(strategy_from_string("beam"), Error);
}
