#include <algorithm>
#include <cmath>

#include "convctx/decode.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace convctx;

namespace {

ModelConfig decode_config(int vocab) {
    ModelConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_conv_blocks = {ConvBlockConfig{{3}, {4}, 2}};
    cfg.decoder_conv = ConvBlockConfig{{3}, {8}, 0};
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.ffn_width = 16;
    cfg.vocab_size = vocab;
    cfg.emb_dim = 6;
    return cfg;
}

Tensor random_memory(const Model& model, Rng& rng, int frames) {
    Tensor feats = Tensor::uniform({frames, model.config().input_dim}, rng, -1.0, 1.0);
    return model.encode_utterance(feats);
}

// Every length <= max_len sequence, scored like the decoder scores them.
struct Enumerated {
    std::vector<Hypothesis> finished;
    std::vector<Hypothesis> unfinished;
};

void enumerate_all(const Model& model, const Tensor& memory, std::vector<int>& prefix,
                   double score, int max_len, Enumerated& out) {
    const int emitted = static_cast<int>(prefix.size()) - 1;
    if (emitted == max_len) {
        out.unfinished.push_back(Hypothesis{prefix, score, false});
        return;
    }
    NoGradGuard guard;
    Tensor logits = model.decoder_logits(memory, prefix);
    const int V = model.config().vocab_size;
    const int U = logits.extent(0);
    std::vector<double> row(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) {
        row[static_cast<std::size_t>(v)] =
            logits.values()[static_cast<std::size_t>((U - 1) * V + v)];
    }
    const auto probs = oracle::softmax_row(row);
    for (int v = 0; v < V; ++v) {
        const double next = score + std::log(probs[static_cast<std::size_t>(v)]);
        prefix.push_back(v);
        if (v == kEosId) {
            out.finished.push_back(Hypothesis{prefix, next, true});
        } else {
            enumerate_all(model, memory, prefix, next, max_len, out);
        }
        prefix.pop_back();
    }
}

}  // namespace

TEST_CASE("hypothesis ordering: score first, then lexicographic tokens") {
    Hypothesis hi{{kBosId, 5}, -1.0, false};
    Hypothesis lo{{kBosId, 4}, -2.0, false};
    CHECK(hyp_before(hi, lo));
    CHECK_FALSE(hyp_before(lo, hi));
    Hypothesis tie_a{{kBosId, 4, 9}, -1.0, false};
    Hypothesis tie_b{{kBosId, 5, 0}, -1.0, false};
    CHECK(hyp_before(tie_a, tie_b));
    CHECK_FALSE(hyp_before(tie_b, tie_a));
    CHECK_FALSE(hyp_before(hi, hi));

    CHECK(default_max_len(0) == 10);
    CHECK(default_max_len(45) == 100);
}

TEST_CASE("beam width one reproduces greedy decoding across seeds") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 13);
        Model model(decode_config(8), rng);
        Tensor memory = random_memory(model, rng, 6);
        const int max_len = 8;
        const Hypothesis greedy = greedy_decode(model, memory, max_len);
        const auto beam = beam_search(model, memory, 1, max_len);
        REQUIRE(!beam.empty());
        CHECK(beam[0].tokens == greedy.tokens);
        CHECK(beam[0].score == greedy.score);
        CHECK(beam[0].finished == greedy.finished);
    }
}

TEST_CASE("a saturated beam equals exhaustive enumeration") {
    oracle::PrecisionGuard guard(Precision::f64);
    for (int vocab : {5, 6}) {
        for (std::uint64_t seed : {3u, 17u}) {
            Rng rng(seed);
            Model model(decode_config(vocab), rng);
            Tensor memory = random_memory(model, rng, 5);
            const int max_len = 3;
            int width = 1;
            for (int i = 0; i < max_len; ++i) width *= vocab;  // vocab^max_len

            Enumerated all;
            std::vector<int> prefix{kBosId};
            enumerate_all(model, memory, prefix, 0.0, max_len, all);
            std::sort(all.finished.begin(), all.finished.end(), hyp_before);
            std::sort(all.unfinished.begin(), all.unfinished.end(), hyp_before);

            const auto got = beam_search(model, memory, width, max_len);
            REQUIRE(!all.finished.empty());
            REQUIRE(!got.empty());
            // every finished sequence is found, in the same order
            REQUIRE(got.size() == std::min(all.finished.size(),
                                           static_cast<std::size_t>(width)));
            for (std::size_t i = 0; i < got.size(); ++i) {
                CHECK(got[i].tokens == all.finished[i].tokens);
                CHECK(got[i].finished);
                CHECK(got[i].score ==
                      doctest::Approx(all.finished[i].score).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("a forced one-hot channel is followed for any beam width") {
    oracle::PrecisionGuard guard(Precision::f64);
    ModelConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_conv_blocks = {ConvBlockConfig{{3}, {4}, 2}};
    cfg.decoder_conv = ConvBlockConfig{{1}, {8}, 0};  // kernel 1: depends on last token only
    cfg.enc_layers = 0;
    cfg.dec_layers = 0;
    cfg.d_model = 8;
    cfg.heads = 1;
    cfg.ffn_width = 8;
    cfg.vocab_size = 8;
    cfg.emb_dim = 8;
    Rng rng(23);
    Model model(cfg, rng);

    // next-token table: BOS -> 5 -> 6 -> 7 -> EOS, everything else -> EOS
    std::vector<int> next(8, kEosId);
    next[kBosId] = 5;
    next[5] = 6;
    next[6] = 7;
    next[7] = kEosId;

    const double kSharp = 50.0;
    for (auto& p : model.params()) {
        auto vals = p.tensor.values();
        if (p.name == "decoder.embedding.weight") {
            // scaled one-hot rows: relu(layer_norm(row)) keeps one spike
            std::fill(vals.begin(), vals.end(), 0.0);
            for (int v = 0; v < 8; ++v) vals[static_cast<std::size_t>(v * 8 + v)] = 4.0;
        } else if (p.name == "decoder.conv.conv0.weight") {
            // [8, 8, 1] identity
            std::fill(vals.begin(), vals.end(), 0.0);
            for (int c = 0; c < 8; ++c) vals[static_cast<std::size_t>(c * 8 + c)] = 1.0;
        } else if (p.name == "decoder.conv.conv0.bias" || p.name == "output.bias") {
            std::fill(vals.begin(), vals.end(), 0.0);
        } else if (p.name == "output.weight") {
            // row v routes all mass to next[v]
            std::fill(vals.begin(), vals.end(), 0.0);
            for (int v = 0; v < 8; ++v) {
                vals[static_cast<std::size_t>(v * 8 + next[static_cast<std::size_t>(v)])] =
                    kSharp;
            }
        }
    }

    Tensor feats = Tensor::uniform({4, cfg.input_dim}, rng, -1.0, 1.0);
    Tensor memory = model.encode_utterance(feats);
    const std::vector<int> forced{kBosId, 5, 6, 7, kEosId};
    const Hypothesis greedy = greedy_decode(model, memory, 10);
    CHECK(greedy.tokens == forced);
    CHECK(greedy.finished);
    for (int beam : {1, 2, 5, 64}) {
        const auto got = beam_search(model, memory, beam, 10);
        REQUIRE(!got.empty());
        CHECK(got[0].tokens == forced);
        CHECK(got[0].finished);
        CHECK(got[0].score > -1e-3);  // essentially deterministic channel
    }
}

TEST_CASE("decoding twice gives bit-identical results") {
    Rng rng(41);
    Model model(decode_config(9), rng);
    Tensor memory = random_memory(model, rng, 7);
    const auto a = beam_search(model, memory, 4, 12);
    const auto b = beam_search(model, memory, 4, 12);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].score == b[i].score);
        CHECK(a[i].finished == b[i].finished);
    }
}

TEST_CASE("beam output is sorted, well-formed, and flags non-termination") {
    Rng rng(43);
    Model model(decode_config(8), rng);
    Tensor memory = random_memory(model, rng, 6);
    const auto hyps = beam_search(model, memory, 5, 6);
    REQUIRE(!hyps.empty());
    for (std::size_t i = 0; i + 1 < hyps.size(); ++i) {
        CHECK_FALSE(hyp_before(hyps[i + 1], hyps[i]));
    }
    for (const auto& h : hyps) {
        REQUIRE(!h.tokens.empty());
        CHECK(h.tokens.front() == kBosId);
        CHECK(std::isfinite(h.score));
        if (h.finished) CHECK(h.tokens.back() == kEosId);
    }

    // an EOS-starved channel: constant logits that never favor EOS
    ModelConfig cfg = decode_config(8);
    cfg.dec_layers = 0;
    Rng rng2(44);
    Model starved(cfg, rng2);
    for (auto& p : starved.params()) {
        auto vals = p.tensor.values();
        if (p.name == "output.weight") std::fill(vals.begin(), vals.end(), 0.0);
        if (p.name == "output.bias") {
            std::fill(vals.begin(), vals.end(), 0.0);
            vals[5] = 40.0;  // always push token 5
        }
    }
    Tensor memory2 = random_memory(starved, rng2, 5);
    const auto stuck = beam_search(starved, memory2, 3, 4);
    REQUIRE(stuck.size() == 1);
    CHECK_FALSE(stuck[0].finished);
    CHECK(stuck[0].tokens == std::vector<int>{kBosId, 5, 5, 5, 5});

    const Hypothesis greedy_stuck = greedy_decode(starved, memory2, 4);
    CHECK_FALSE(greedy_stuck.finished);
    CHECK(greedy_stuck.tokens == stuck[0].tokens);

    CHECK_THROWS_AS(beam_search(model, memory, 0, 5), ContractError);
    CHECK_THROWS_AS(beam_search(model, memory, 2, 0), ContractError);
}

TEST_CASE("format_hypothesis sanitizes reserved ids and frames the text") {
    const Vocab vocab = Vocab::from_units({"▁hi", "▁there"});
    Hypothesis hyp;
    hyp.tokens = {kBosId, vocab.id_of("▁hi"), kPadId, vocab.id_of("▁there"), kEosId};
    hyp.score = -1.25;
    hyp.finished = true;
    const std::string line = format_hypothesis("utt-7", hyp, vocab);
    CHECK(line == "utt-7\t-1.250000\thi there");
}
