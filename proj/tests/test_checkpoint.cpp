#include <filesystem>
#include <fstream>

#include "convctx/checkpoint.hpp"
#include "convctx/config.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace convctx;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_conv_blocks = {ConvBlockConfig{{3}, {4}, 2}};
    cfg.decoder_conv = ConvBlockConfig{{3}, {8}, 0};
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.ffn_width = 16;
    cfg.vocab_size = 9;
    cfg.emb_dim = 6;
    return cfg;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("snapshot carries every parameter by value") {
    oracle::PrecisionGuard guard(Precision::f32);
    Rng rng(1);
    Model model(small_config(), rng);
    Checkpoint ckpt = snapshot(model, "cfg-echo", "unit test");
    CHECK(ckpt.config_text == "cfg-echo");
    CHECK(ckpt.provenance == "unit test");
    REQUIRE(ckpt.params.size() == model.params().size());
    // mutating the model afterwards must not touch the snapshot
    const double before = ckpt.params[0].tensor.values()[0];
    model.params()[0].tensor.values()[0] = before + 1.0;
    CHECK(ckpt.params[0].tensor.values()[0] == before);
}

TEST_CASE("apply_checkpoint restores a model bit-for-bit in f32 mode") {
    oracle::PrecisionGuard guard(Precision::f32);
    const ModelConfig cfg = small_config();
    Rng ra(2), rb(3);
    Model a(cfg, ra), b(cfg, rb);
    const Checkpoint ckpt = snapshot(a, "", "");
    apply_checkpoint(ckpt, b);
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const auto va = a.params()[i].tensor.values();
        const auto vb = b.params()[i].tensor.values();
        for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
    }
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
    oracle::PrecisionGuard guard(Precision::f32);
    namespace fs = std::filesystem;
    const fs::path p1 = fs::temp_directory_path() / "convctx_ckpt_a.ckpt";
    const fs::path p2 = fs::temp_directory_path() / "convctx_ckpt_b.ckpt";
    Rng rng(4);
    Model model(small_config(), rng);
    RunConfig run;
    run.model = small_config();
    const Checkpoint ckpt = snapshot(model, serialize_config(run), "epoch 12");
    save_checkpoint(p1.string(), ckpt);
    const Checkpoint loaded = load_checkpoint(p1.string());
    CHECK(loaded.config_text == ckpt.config_text);
    CHECK(loaded.provenance == ckpt.provenance);
    REQUIRE(loaded.params.size() == ckpt.params.size());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        CHECK(loaded.params[i].name == ckpt.params[i].name);
        CHECK(loaded.params[i].tensor.shape() == ckpt.params[i].tensor.shape());
        const auto va = ckpt.params[i].tensor.values();
        const auto vb = loaded.params[i].tensor.values();
        for (std::size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
    }
    // write the loaded copy: the files must be byte-identical
    save_checkpoint(p2.string(), loaded);
    CHECK(slurp(p1) == slurp(p2));

    // the embedded config reconstructs the model shape
    const RunConfig echoed = parse_config(loaded.config_text);
    CHECK(echoed.model == run.model);
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("apply_checkpoint names the first offending parameter") {
    oracle::PrecisionGuard guard(Precision::f32);
    const ModelConfig cfg = small_config();
    Rng rng(5);
    Model model(cfg, rng);
    Checkpoint renamed = snapshot(model, "", "");
    renamed.params[3].name = "imposter.weight";
    CHECK_THROWS_WITH_AS(apply_checkpoint(renamed, model),
                         doctest::Contains("imposter.weight"), InputError);

    Checkpoint reshaped = snapshot(model, "", "");
    const std::string victim = reshaped.params[5].name;
    reshaped.params[5].tensor = Tensor::zeros({2, 2});
    CHECK_THROWS_WITH_AS(apply_checkpoint(reshaped, model), doctest::Contains(victim.c_str()),
                         InputError);

    Checkpoint truncated = snapshot(model, "", "");
    const std::string missing = truncated.params.back().name;
    truncated.params.pop_back();
    CHECK_THROWS_WITH_AS(apply_checkpoint(truncated, model), doctest::Contains(missing.c_str()),
                         InputError);
}

TEST_CASE("corrupt checkpoint files are rejected") {
    oracle::PrecisionGuard guard(Precision::f32);
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "convctx_ckpt_corrupt.ckpt";
    Rng rng(6);
    Model model(small_config(), rng);
    save_checkpoint(path.string(), snapshot(model, "cfg", "prov"));

    const auto full = fs::file_size(path);
    fs::resize_file(path, full - 13);
    CHECK_THROWS_AS(load_checkpoint(path.string()), InputError);

    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_AS(load_checkpoint(path.string()), InputError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/convctx.ckpt"), InputError);
    fs::remove(path);
}

TEST_CASE("checkpoint values are exactly f32 even when saved from f64 mode") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "convctx_ckpt_f64.ckpt";
    Checkpoint ckpt;
    {
        oracle::PrecisionGuard guard(Precision::f64);
        ckpt.params.push_back(NamedParam{"w", Tensor::from({2}, {1.0 / 3.0, 0.1})});
        save_checkpoint(path.string(), ckpt);
    }
    const Checkpoint loaded = load_checkpoint(path.string());
    CHECK(loaded.params[0].tensor.values()[0] ==
          static_cast<double>(static_cast<float>(1.0 / 3.0)));
    CHECK(loaded.params[0].tensor.values()[1] ==
          static_cast<double>(static_cast<float>(0.1)));
    fs::remove(path);
}
