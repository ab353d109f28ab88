#include <cmath>
#include <filesystem>
#include <fstream>

#include "convctx/optim.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace convctx;

namespace {

NamedParam named(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    return NamedParam{name, std::move(t)};
}

void set_grad(Tensor& t, const std::vector<double>& g) {
    auto dst = t.grad_mut();
    REQUIRE(dst.size() == g.size());
    std::copy(g.begin(), g.end(), dst.begin());
}

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_conv_blocks = {ConvBlockConfig{{3}, {4}, 2}};
    cfg.decoder_conv = ConvBlockConfig{{3}, {8}, 0};
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.ffn_width = 16;
    cfg.vocab_size = 8;
    cfg.emb_dim = 6;
    return cfg;
}

// Ten utterances whose transcript is recoverable from the features: token k
// maps to a burst in feature dimension k.
Dataset copy_task(int n_utts, Rng& rng) {
    Dataset data;
    for (int i = 0; i < n_utts; ++i) {
        const int n_tok = 2 + static_cast<int>(rng.below(3));
        Utterance u;
        u.id = "copy-" + std::to_string(i);
        for (int t = 0; t < n_tok; ++t) {
            u.tokens.push_back(kNumReservedIds + static_cast<int>(rng.below(4)));
        }
        u.features = Tensor::zeros({4 * n_tok, 4});
        for (int t = 0; t < n_tok; ++t) {
            const int dim = u.tokens[static_cast<std::size_t>(t)] - kNumReservedIds;
            for (int f = 0; f < 4; ++f) {
                u.features.values()[static_cast<std::size_t>((4 * t + f) * 4 + dim)] = 1.0;
            }
        }
        data.push_back(std::move(u));
    }
    return data;
}

}  // namespace

TEST_CASE("global norm and clipping") {
    oracle::PrecisionGuard guard(Precision::f64);
    std::vector<NamedParam> params;
    params.push_back(named("a", Tensor::from({2}, {3.0, 0.0})));
    params.push_back(named("b", Tensor::from({1}, {4.0})));
    set_grad(params[0].tensor, {3.0, 0.0});
    set_grad(params[1].tensor, {4.0});
    CHECK(global_grad_norm(params) == doctest::Approx(5.0).epsilon(1e-12));

    // below the threshold: untouched
    double norm = clip_gradients(params, 10.0);
    CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(params[0].tensor.grad()[0] == 3.0);
    CHECK(params[1].tensor.grad()[0] == 4.0);

    // [20, 0] with threshold 10 -> [10, 0]
    std::vector<NamedParam> big;
    big.push_back(named("g", Tensor::from({2}, {0.0, 0.0})));
    set_grad(big[0].tensor, {20.0, 0.0});
    norm = clip_gradients(big, 10.0);
    CHECK(norm == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(big[0].tensor.grad()[0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(big[0].tensor.grad()[1] == 0.0);

    // norm 25 vector: clipped norm 10 within 1e-9, direction preserved
    std::vector<NamedParam> vec;
    vec.push_back(named("v", Tensor::zeros({3})));
    set_grad(vec[0].tensor, {12.0, 15.0, 16.0});  // sqrt(144+225+256) = 25
    const std::vector<double> before(vec[0].tensor.grad().begin(),
                                     vec[0].tensor.grad().end());
    norm = clip_gradients(vec, 10.0);
    CHECK(norm == doctest::Approx(25.0).epsilon(1e-12));
    double clipped_norm = 0.0, dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double g = vec[0].tensor.grad()[static_cast<std::size_t>(i)];
        clipped_norm += g * g;
        dot += g * before[static_cast<std::size_t>(i)];
        na += g * g;
        nb += before[static_cast<std::size_t>(i)] * before[static_cast<std::size_t>(i)];
    }
    CHECK(std::abs(std::sqrt(clipped_norm) - 10.0) < 1e-9);
    CHECK(std::abs(dot / std::sqrt(na * nb) - 1.0) < 1e-12);

    CHECK_THROWS_AS(clip_gradients(vec, 0.0), ContractError);
}

TEST_CASE("adadelta: zero gradient leaves the parameter untouched") {
    oracle::PrecisionGuard guard(Precision::f64);
    std::vector<NamedParam> params;
    params.push_back(named("w", Tensor::from({2}, {1.5, -2.5})));
    AdaDeltaState state;
    // seed the accumulators with a real step first
    set_grad(params[0].tensor, {0.5, -0.25});
    adadelta_step(params, state);
    const double after_first_0 = params[0].tensor.values()[0];
    const double after_first_1 = params[0].tensor.values()[1];
    // now a zero gradient: dx = 0 regardless of accumulator state
    set_grad(params[0].tensor, {0.0, 0.0});
    adadelta_step(params, state);
    CHECK(params[0].tensor.values()[0] == after_first_0);
    CHECK(params[0].tensor.values()[1] == after_first_1);
    CHECK(state.lr == 1.0);
}

TEST_CASE("adadelta first step and long trajectory match the scalar oracle") {
    oracle::PrecisionGuard guard(Precision::f64);
    const double rho = 0.95, eps = 1e-6;
    std::vector<NamedParam> params;
    params.push_back(named("x", Tensor::from({1}, {0.7})));
    AdaDeltaState state;
    state.rho = rho;
    state.eps = eps;

    // first step: dx = -sqrt(eps) / sqrt((1-rho) g^2 + eps) * g
    const double g0 = 0.3;
    set_grad(params[0].tensor, {g0});
    adadelta_step(params, state);
    const double want_dx = -std::sqrt(eps) / std::sqrt((1 - rho) * g0 * g0 + eps) * g0;
    CHECK(params[0].tensor.values()[0] == doctest::Approx(0.7 + want_dx).epsilon(1e-15));

    // trajectory vs the independent scalar recurrence
    oracle::AdaDeltaScalar scalar;
    double x = 0.7;
    scalar.step(x, g0, rho, eps, 1.0);
    Rng rng(3);
    for (int step = 0; step < 200; ++step) {
        const double g = rng.uniform(-1.0, 1.0);
        set_grad(params[0].tensor, {g});
        adadelta_step(params, state);
        scalar.step(x, g, rho, eps, 1.0);
        CHECK(std::abs(params[0].tensor.values()[0] - x) < 1e-12);
    }
}

TEST_CASE("adadelta rejects a parameter set that changed shape") {
    std::vector<NamedParam> params;
    params.push_back(named("stable", Tensor::zeros({3})));
    AdaDeltaState state;
    set_grad(params[0].tensor, {0.1, 0.2, 0.3});
    adadelta_step(params, state);
    std::vector<NamedParam> other;
    other.push_back(named("stable", Tensor::zeros({4})));
    set_grad(other[0].tensor, {0.1, 0.2, 0.3, 0.4});
    CHECK_THROWS_WITH_AS(adadelta_step(other, state),
                         doctest::Contains("stable"), DimensionError);
}

TEST_CASE("training the copy task: loss strictly decreases for five epochs") {
    oracle::PrecisionGuard guard(Precision::f64);
    const ModelConfig cfg = micro_config();
    Rng rng(17);
    Model model(cfg, rng);
    Rng data_rng(5);
    const Dataset data = copy_task(10, data_rng);
    std::vector<int> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const auto batches = make_batches(data, order, 5);

    AdaDeltaState state;
    double prev = 1e300;
    for (int epoch = 1; epoch <= 5; ++epoch) {
        const EpochStats stats = train_epoch(model, batches, state, 10.0, 0.0, rng, epoch);
        CHECK(stats.batches == 2);
        CHECK(stats.mean_loss < prev);
        CHECK(std::isfinite(stats.mean_loss));
        CHECK(stats.grad_p10 <= stats.grad_p50);
        CHECK(stats.grad_p50 <= stats.grad_p90);
        prev = stats.mean_loss;
    }
    CHECK(dataset_loss(model, batches) < std::log(static_cast<double>(cfg.vocab_size)));
    const double acc = token_accuracy(model, batches);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
}

TEST_CASE("an empty batch list trains nothing") {
    const ModelConfig cfg = micro_config();
    Rng rng(18);
    Model model(cfg, rng);
    AdaDeltaState state;
    const EpochStats stats = train_epoch(model, {}, state, 10.0, 0.0, rng, 1);
    CHECK(stats.batches == 0);
    CHECK(stats.tokens == 0);
    CHECK(stats.mean_loss == 0.0);
}

TEST_CASE("a poisoned parameter aborts the epoch with a numeric error") {
    const ModelConfig cfg = micro_config();
    Rng rng(19);
    Model model(cfg, rng);
    bool poisoned = false;
    for (auto& p : model.params()) {
        if (p.name == "output.weight") {
            p.tensor.values()[0] = std::nan("");
            poisoned = true;
        }
    }
    REQUIRE(poisoned);
    Rng data_rng(6);
    const Dataset data = copy_task(4, data_rng);
    std::vector<int> order{0, 1, 2, 3};
    const auto batches = make_batches(data, order, 4);
    AdaDeltaState state;
    CHECK_THROWS_AS(train_epoch(model, batches, state, 10.0, 0.0, rng, 1), NumericError);
}

TEST_CASE("training is deterministic in the seed") {
    const ModelConfig cfg = micro_config();
    Rng data_rng(7);
    const Dataset data = copy_task(6, data_rng);
    std::vector<int> order{0, 1, 2, 3, 4, 5};
    const auto batches = make_batches(data, order, 3);

    auto run = [&](std::uint64_t seed) {
        Rng rng(seed);
        Model model(cfg, rng);
        AdaDeltaState state;
        for (int e = 1; e <= 3; ++e) train_epoch(model, batches, state, 10.0, 0.1, rng, e);
        std::vector<double> flat;
        for (const auto& p : model.params()) {
            flat.insert(flat.end(), p.tensor.values().begin(), p.tensor.values().end());
        }
        return flat;
    };
    const auto a = run(123), b = run(123), c = run(321);
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("checkpoint averaging: idempotent and exact on known values") {
    oracle::PrecisionGuard guard(Precision::f64);
    Checkpoint one;
    one.config_text = "x";
    one.params.push_back(NamedParam{"w", Tensor::from({2}, {1.0, -4.0})});
    const Checkpoint same = average_checkpoints({one});
    REQUIRE(same.params[0].tensor.size() == one.params[0].tensor.size());
    for (std::size_t i = 0; i < same.params[0].tensor.values().size(); ++i) {
        CHECK(same.params[0].tensor.values()[i] == one.params[0].tensor.values()[i]);
    }

    Checkpoint other = one;
    other.params[0].tensor = Tensor::from({2}, {3.0, 4.0});
    const Checkpoint mid = average_checkpoints({one, other});
    CHECK(mid.params[0].tensor.values()[0] == 2.0);
    CHECK(mid.params[0].tensor.values()[1] == 0.0);
}

TEST_CASE("averaging five random checkpoints matches the explicit mean") {
    oracle::PrecisionGuard guard(Precision::f64);
    Rng rng(20);
    std::vector<Checkpoint> set;
    for (int i = 0; i < 5; ++i) {
        Checkpoint c;
        c.params.push_back(NamedParam{"a", Tensor::uniform({3, 2}, rng, -1.0, 1.0)});
        c.params.push_back(NamedParam{"b", Tensor::uniform({4}, rng, -1.0, 1.0)});
        set.push_back(std::move(c));
    }
    const Checkpoint avg = average_checkpoints(set);
    for (std::size_t p = 0; p < 2; ++p) {
        for (std::size_t i = 0; i < avg.params[p].tensor.values().size(); ++i) {
            double sum = 0.0;
            for (const auto& c : set) sum += c.params[p].tensor.values()[i];
            CHECK(std::abs(avg.params[p].tensor.values()[i] - sum / 5.0) < 1e-12);
        }
    }
}

TEST_CASE("averaging names the first mismatched parameter") {
    Checkpoint a, b;
    a.params.push_back(NamedParam{"w", Tensor::zeros({2})});
    b.params.push_back(NamedParam{"w_renamed", Tensor::zeros({2})});
    CHECK_THROWS_WITH_AS(average_checkpoints({a, b}), doctest::Contains("w_renamed"),
                         InputError);
    Checkpoint c;
    c.params.push_back(NamedParam{"w", Tensor::zeros({3})});
    CHECK_THROWS_WITH_AS(average_checkpoints({a, c}), doctest::Contains("w"), InputError);
    CHECK_THROWS_AS(average_checkpoints({}), InputError);
}

TEST_CASE("checkpoint file naming and listing") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "convctx_ckpt_list_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    CHECK(checkpoint_path(dir.string(), 3) == (dir / "ckpt-00003.ckpt").string());
    for (int e : {12, 3, 7}) {
        Checkpoint c;
        c.params.push_back(NamedParam{"w", Tensor::zeros({1})});
        save_checkpoint(checkpoint_path(dir.string(), e), c);
    }
    const auto found = list_checkpoints(dir.string());
    REQUIRE(found.size() == 3);
    CHECK(found[0].first == 3);
    CHECK(found[1].first == 7);
    CHECK(found[2].first == 12);
    fs::remove_all(dir);
}

TEST_CASE("trainer writes checkpoints, metrics, and honors retention") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "convctx_trainer_test";
    fs::remove_all(dir);

    RunConfig cfg;
    cfg.model = micro_config();
    cfg.seed = 11;
    cfg.train.epochs = 5;
    cfg.train.batch_size = 4;
    cfg.train.checkpoint_dir = (dir / "ckpts").string();
    cfg.train.checkpoint_retention = 2;
    cfg.train.metrics_log = (dir / "metrics.log").string();

    Rng rng(cfg.seed);
    Model model(cfg.model, rng);
    Rng data_rng(8);
    const Dataset data = copy_task(6, data_rng);
    Trainer trainer(model, data, cfg, rng);
    const auto stats = trainer.run();
    REQUIRE(stats.size() == 5);

    const auto kept = list_checkpoints(cfg.train.checkpoint_dir);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].first == 4);
    CHECK(kept[1].first == 5);

    // the retained checkpoint restores into a fresh model
    const Checkpoint last = load_checkpoint(kept[1].second);
    Rng rng2(99);
    Model fresh(cfg.model, rng2);
    apply_checkpoint(last, fresh);
    std::vector<int> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const auto batches = make_batches(data, order, 4);
    CHECK(dataset_loss(fresh, batches) ==
          doctest::Approx(dataset_loss(model, batches)).epsilon(1e-6));

    std::ifstream metrics(cfg.train.metrics_log);
    REQUIRE(metrics.good());
    std::string line;
    int lines = 0;
    while (std::getline(metrics, line)) {
        if (!line.empty()) {
            ++lines;
            CHECK(line.find("mean_loss=") != std::string::npos);
            CHECK(line.find("grad_p50=") != std::string::npos);
        }
    }
    CHECK(lines == 5);
    fs::remove_all(dir);
}

TEST_CASE("zero epochs is a successful no-op") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "convctx_noop_test";
    fs::remove_all(dir);
    RunConfig cfg;
    cfg.model = micro_config();
    cfg.train.epochs = 0;
    cfg.train.checkpoint_dir = (dir / "ckpts").string();
    Rng rng(1);
    Model model(cfg.model, rng);
    Rng data_rng(9);
    const Dataset data = copy_task(3, data_rng);
    Trainer trainer(model, data, cfg, rng);
    CHECK(trainer.run().empty());
    CHECK(list_checkpoints(cfg.train.checkpoint_dir).empty());
    fs::remove_all(dir);
}
