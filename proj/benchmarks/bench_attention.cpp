#include <benchmark/benchmark.h>

#include "convctx/layers.hpp"

using namespace convctx;

static void BM_ScaledDotAttention(benchmark::State& state) {
    const int T = static_cast<int>(state.range(0));
    const int d = 64;
    NoGradGuard guard;
    Rng rng(1);
    Tensor q = Tensor::uniform({T, d}, rng, -1.0, 1.0);
    Tensor k = Tensor::uniform({T, d}, rng, -1.0, 1.0);
    Tensor v = Tensor::uniform({T, d}, rng, -1.0, 1.0);
    const Mask mask = Mask::all(T, T);
    for (auto _ : state) {
        benchmark::DoNotOptimize(scaled_dot_attention(q, k, v, mask));
    }
    state.SetComplexityN(T);
}
BENCHMARK(BM_ScaledDotAttention)->Arg(32)->Arg(64)->Arg(128)->Arg(256)->Complexity();

static void BM_MultiHeadAttention(benchmark::State& state) {
    const int T = 64;
    const int d = static_cast<int>(state.range(0));
    const int h = 8;
    NoGradGuard guard;
    Rng rng(2);
    AttentionConfig cfg{d, d / h, d / h, h, d};
    MultiHeadAttention mha(cfg, rng);
    Tensor x = Tensor::uniform({T, d}, rng, -1.0, 1.0);
    const Mask mask = Mask::causal(T);
    for (auto _ : state) {
        benchmark::DoNotOptimize(mha.forward(x, x, mask));
    }
}
BENCHMARK(BM_MultiHeadAttention)->Arg(64)->Arg(128)->Arg(256);

static void BM_TransformerBlockBackward(benchmark::State& state) {
    const int T = 32, d = 64;
    Rng rng(3);
    TransformerBlock block(d, 8, 4 * d, rng);
    Tensor x = Tensor::uniform({T, d}, rng, -1.0, 1.0, true);
    const Mask mask = Mask::all(T, T);
    for (auto _ : state) {
        x.zero_grad();
        Tape tape;
        Tensor loss = sum(block.forward(x, mask, 0.0, nullptr));
        tape.backward(loss);
        benchmark::DoNotOptimize(x.grad().data());
    }
}
BENCHMARK(BM_TransformerBlockBackward);
