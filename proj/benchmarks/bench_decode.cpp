#include <benchmark/benchmark.h>

#include "convctx/decode.hpp"

using namespace convctx;

namespace {

struct Fixture {
    ModelConfig cfg = preset("toy");
    Rng rng{7};
    Model model{cfg, rng};
    Tensor memory;

    Fixture() {
        NoGradGuard guard;
        Tensor feats = Tensor::uniform({40, cfg.input_dim}, rng, -1.0, 1.0);
        memory = model.encode_utterance(feats);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

static void BM_GreedyDecode(benchmark::State& state) {
    Fixture& f = fixture();
    for (auto _ : state) {
        benchmark::DoNotOptimize(greedy_decode(f.model, f.memory, 12));
    }
}
BENCHMARK(BM_GreedyDecode);

static void BM_BeamSearch(benchmark::State& state) {
    Fixture& f = fixture();
    const int beam = static_cast<int>(state.range(0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(beam_search(f.model, f.memory, beam, 12));
    }
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(5)->Arg(20);

BENCHMARK_MAIN();
