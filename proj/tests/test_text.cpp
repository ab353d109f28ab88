#include <filesystem>
#include <fstream>

#include "convctx/text.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace convctx;

namespace {

Vocab demo_vocab() {
    // enough coverage to segment simple lowercase sentences
    return Vocab::from_units({"▁the", "▁cat", "▁sat", "▁on", "▁mat", "▁a", "s", "at",
                              "▁c", "▁s", "t", "h", "e", "▁t"});
}

}  // namespace

TEST_CASE("vocab reserves pad/bos/eos/unk at the bottom") {
    const Vocab v = demo_vocab();
    CHECK(v.size() == 4 + 14);
    CHECK(v.symbol_of(kPadId) == "<pad>");
    CHECK(v.symbol_of(kBosId) == "<bos>");
    CHECK(v.symbol_of(kEosId) == "<eos>");
    CHECK(v.symbol_of(kUnkId) == "<unk>");
    CHECK(v.id_of("▁the") == kNumReservedIds);
    CHECK(v.id_of("no-such-unit") == kUnkId);
    CHECK_THROWS_AS(v.symbol_of(-1), InputError);
    CHECK_THROWS_AS(v.symbol_of(v.size()), InputError);

    CHECK_THROWS_AS(Vocab::from_units({"a", "a"}), InputError);
    CHECK_THROWS_AS(Vocab::from_units({""}), InputError);
    CHECK_THROWS_AS(Vocab::from_units({"<pad>"}), InputError);
}

TEST_CASE("vocab survives a save/load round trip") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "convctx_vocab_test.txt";
    const Vocab v = demo_vocab();
    v.save(path.string());
    const Vocab loaded = Vocab::load(path.string());
    REQUIRE(loaded.size() == v.size());
    CHECK(loaded.boundary() == v.boundary());
    for (int id = 0; id < v.size(); ++id) CHECK(loaded.symbol_of(id) == v.symbol_of(id));
    CHECK_THROWS_AS(Vocab::load("/nonexistent/convctx.vocab"), InputError);
    fs::remove(path);
}

TEST_CASE("a five-thousand-unit file yields vocab size 5004") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "convctx_vocab_5k.txt";
    {
        std::ofstream out(path);
        for (int i = 0; i < 5000; ++i) {
            out << (i % 2 == 0 ? "▁u" : "u") << i << "\n";
        }
    }
    const Vocab v = Vocab::load(path.string());
    CHECK(v.size() == 5004);
    fs::remove(path);
}

TEST_CASE("encode emits bos/eos and greedy longest matches") {
    const Vocab v = demo_vocab();
    const auto ids = encode("the cat sat", v);
    REQUIRE(ids.size() >= 2);
    CHECK(ids.front() == kBosId);
    CHECK(ids.back() == kEosId);
    CHECK(ids == std::vector<int>{kBosId, v.id_of("▁the"), v.id_of("▁cat"),
                                  v.id_of("▁sat"), kEosId});

    // "mat" is only reachable via the whole-word unit; "that" must fall back
    // to pieces: ▁t + h + at.
    const auto pieces = encode("that", v);
    CHECK(pieces == std::vector<int>{kBosId, v.id_of("▁t"), v.id_of("h"),
                                     v.id_of("at"), kEosId});

    CHECK(encode("", v) == std::vector<int>{kBosId, kEosId});
    CHECK(encode("   ", v) == std::vector<int>{kBosId, kEosId});
}

TEST_CASE("unknown characters degrade to unk without derailing the word") {
    const Vocab v = demo_vocab();
    const auto ids = encode("the zat", v);
    // ▁the, then ▁ has no match for "zat": z -> unk, then "at"
    REQUIRE(ids.size() == 5);
    CHECK(ids[1] == v.id_of("▁the"));
    CHECK(ids[2] == kUnkId);
    CHECK(ids[3] == v.id_of("at"));
}

TEST_CASE("decode inverts encode for in-vocabulary text") {
    const Vocab v = demo_vocab();
    for (const std::string text : {"the cat sat on the mat", "a cat", "the the the"}) {
        CHECK(decode(encode(text, v), v) == text);
    }
    CHECK(decode(encode("", v), v) == "");
    CHECK(decode({kBosId, kEosId}, v) == "");
    // frame optional
    CHECK(decode({v.id_of("▁cat")}, v) == "cat");
}

TEST_CASE("decode rejects malformed sequences") {
    const Vocab v = demo_vocab();
    CHECK_THROWS_AS(decode({kBosId, v.id_of("▁cat"), kPadId, kEosId}, v), InputError);
    CHECK_THROWS_AS(decode({kBosId, v.id_of("▁cat"), kBosId, kEosId}, v), InputError);
    CHECK_THROWS_AS(decode({kBosId, kEosId, v.id_of("▁cat")}, v), InputError);
    CHECK_THROWS_AS(decode({kBosId, v.size(), kEosId}, v), InputError);
    CHECK_THROWS_AS(decode({kBosId, -3, kEosId}, v), InputError);
}

TEST_CASE("words_of splits the decoded text") {
    const Vocab v = demo_vocab();
    const auto ids = encode("the cat sat", v);
    CHECK(words_of(ids, v) == std::vector<std::string>{"the", "cat", "sat"});
    CHECK(split_words("  a   b  c ") == std::vector<std::string>{"a", "b", "c"});
    CHECK(split_words("").empty());
}

TEST_CASE("wer on trivial and hand-checked cases") {
    const std::vector<std::string> abc{"a", "b", "c"};
    const WerBreakdown same = wer(abc, abc);
    CHECK(same.edits() == 0);
    CHECK(same.rate == 0.0);
    CHECK(same.ref_len == 3);

    // deleting "b": one deletion, rate 1/3
    const WerBreakdown del = wer(abc, {"a", "c"});
    CHECK(del.substitutions == 0);
    CHECK(del.insertions == 0);
    CHECK(del.deletions == 1);
    CHECK(del.rate == doctest::Approx(1.0 / 3.0));

    const WerBreakdown ins = wer(abc, {"a", "x", "b", "c"});
    CHECK(ins.insertions == 1);
    CHECK(ins.edits() == 1);

    const WerBreakdown sub = wer(abc, {"a", "x", "c"});
    CHECK(sub.substitutions == 1);
    CHECK(sub.edits() == 1);

    // empty hypothesis: all deletions, rate 1
    const WerBreakdown gone = wer(abc, {});
    CHECK(gone.deletions == 3);
    CHECK(gone.rate == doctest::Approx(1.0));

    // rate can exceed one
    const WerBreakdown flood = wer({"a"}, {"x", "y", "z"});
    CHECK(flood.edits() == 3);
    CHECK(flood.rate == doctest::Approx(3.0));

    CHECK_THROWS_AS(wer({}, {"a"}), ContractError);
}

TEST_CASE("wer equals the exhaustive minimum over short random pairs") {
    const std::vector<std::string> alphabet{"x", "y", "z"};
    Rng rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<std::string> ref, hyp;
        const int rn = 1 + static_cast<int>(rng.below(8));
        const int hn = static_cast<int>(rng.below(9));
        for (int i = 0; i < rn; ++i) ref.push_back(alphabet[rng.below(3)]);
        for (int i = 0; i < hn; ++i) hyp.push_back(alphabet[rng.below(3)]);
        const WerBreakdown got = wer(ref, hyp);
        CHECK(got.edits() == oracle::edit_distance_enum(ref, hyp));
        CHECK(got.rate == doctest::Approx(static_cast<double>(got.edits()) / rn));
    }
}
