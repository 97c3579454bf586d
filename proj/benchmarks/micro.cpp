#include "dps/decoder.hpp"
#include "dps/discovery.hpp"
#include "dps/pipeline.hpp"
#include "dps/synth.hpp"
#include "dps/tokenizer.hpp"
#include "dps/transformer.hpp"

#include <benchmark/benchmark.h>

namespace {

struct Fixture {
    dps::Benchmark       bench;
    dps::ModelCheckpoint ckpt;
    dps::TokenSequence   context;

    Fixture() {
        dps::SynthParams p;
        p.train_per_user    = 1;
        p.discover_per_user = 8;
        p.eval_per_user     = 1;
        bench               = dps::generate_benchmark(p, 7);
        const auto users    = bench.user_ids();
        ckpt = dps::init_checkpoint(dps::model_config_for(dps::ModelShape{}, users.size(), 7), users);
        const dps::Tokenizer tok(users);
        context = tok.encode_context(bench.eval.examples.front(), ckpt.config().max_seq_len, true, 32);
    }
};

const Fixture & fixture() {
    static const Fixture f;
    return f;
}

void BM_Forward(benchmark::State & state) {
    const auto &           f = fixture();
    const dps::Transformer model(f.ckpt);
    const auto             seq = dps::Tokenizer(f.ckpt.user_vocab()).encode_example(f.bench.eval.examples.front(), 64);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(seq.ids));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(seq.size()));
}
BENCHMARK(BM_Forward);

void BM_PcsSweep(benchmark::State & state) {
    const auto & f = fixture();
    const std::span<const dps::Example> data(f.bench.discover.examples.data(), static_cast<size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(dps::compute_pcs(f.ckpt, data));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PcsSweep)->Arg(8)->Arg(32);

// One generated token: single-pass vanilla versus the two-pass contrast.
void BM_DecodeStep(benchmark::State & state) {
    const auto &      f = fixture();
    dps::DecodeConfig config;
    config.max_new_tokens = 1;
    const auto suppression =
        dps::SuppressionMap::binary(f.ckpt.config(), std::vector<dps::HeadId>{{0, 1}, {2, 3}});
    for (auto _ : state) {
        if (state.range(0) == 1) {
            benchmark::DoNotOptimize(dps::vanilla_decode(f.ckpt, f.context, config));
        } else {
            benchmark::DoNotOptimize(dps::dps_decode(f.ckpt, f.context, suppression, config));
        }
    }
}
BENCHMARK(BM_DecodeStep)->ArgName("passes")->Arg(1)->Arg(2);

} // namespace
BENCHMARK_MAIN();
