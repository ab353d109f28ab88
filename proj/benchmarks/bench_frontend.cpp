#include <benchmark/benchmark.h>

#include "convctx/audio.hpp"
#include "convctx/model.hpp"

using namespace convctx;

static void BM_EncoderConvFrontend(benchmark::State& state) {
    const int T = static_cast<int>(state.range(0));
    NoGradGuard guard;
    Rng rng(1);
    ModelConfig cfg = preset("toy");
    Model model(cfg, rng);
    Tensor feats = Tensor::uniform({T, cfg.input_dim}, rng, -1.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.encoder_frontend(feats));
    }
    state.SetComplexityN(T);
}
BENCHMARK(BM_EncoderConvFrontend)->Arg(50)->Arg(100)->Arg(200)->Arg(400)->Complexity();

static void BM_Logmel(benchmark::State& state) {
    FeatureConfig cfg;
    cfg.mel_bins = 80;
    Rng rng(2);
    std::vector<double> samples(static_cast<std::size_t>(cfg.sample_rate));  // 1 s
    for (double& s : samples) s = rng.uniform(-0.5, 0.5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(logmel(samples, cfg));
    }
}
BENCHMARK(BM_Logmel);

static void BM_ToyTrainStep(benchmark::State& state) {
    Rng rng(3);
    ModelConfig cfg = preset("toy");
    Model model(cfg, rng);
    SyntheticTask task;
    Dataset data = make_synthetic(task, 4, 42);
    std::vector<int> order{0, 1, 2, 3};
    std::vector<Batch> batches = make_batches(data, order, 4);
    for (auto _ : state) {
        model.zero_grads();
        Tape tape;
        Tensor loss = model.loss(batches[0]);
        tape.backward(loss);
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_ToyTrainStep);
