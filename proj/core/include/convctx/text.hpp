#pragma once

#include <string>
#include <vector>

#include "convctx/data.hpp"

namespace convctx {

// ---------------------------------------------------------------------------
// Vocabulary: reserved ids 0..3 (pad, bos, eos, unk) followed by subword
// units in file order. Units carrying the boundary marker prefix start a new
// word when detokenizing.
// ---------------------------------------------------------------------------

class Vocab {
public:
    Vocab() = default;
    static Vocab from_units(const std::vector<std::string>& units,
                            const std::string& boundary = "▁");
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int size() const { return static_cast<int>(symbols_.size()); }
    const std::string& boundary() const { return boundary_; }
    // unk for unknown symbols.
    int id_of(const std::string& symbol) const;
    const std::string& symbol_of(int id) const;

private:
    std::vector<std::string> symbols_;  // index == id, reserved first
    std::string boundary_ = "▁";
};

// Greedy longest-match subword segmentation. Words are whitespace separated;
// each word is matched with the boundary marker prepended. Returns
// [bos, units..., eos]; unmatched spans become unk one character at a time.
std::vector<int> encode(const std::string& text, const Vocab& vocab);

// Inverse of encode for in-vocabulary text. Accepts ids with or without the
// bos/eos frame; pad inside the sequence or an out-of-range id is an error.
std::string decode(const std::vector<int>& ids, const Vocab& vocab);

// decode() followed by whitespace splitting: the word sequence WER scores.
std::vector<std::string> words_of(const std::vector<int>& ids, const Vocab& vocab);
std::vector<std::string> split_words(const std::string& text);

// ---------------------------------------------------------------------------
// Word error rate
// ---------------------------------------------------------------------------

struct WerBreakdown {
    int substitutions = 0;
    int insertions = 0;
    int deletions = 0;
    int ref_len = 0;
    double rate = 0.0;

    int edits() const { return substitutions + insertions + deletions; }
};

// Levenshtein alignment minimizing S+I+D; rate = (S+I+D) / len(ref).
// Empty reference is a contract violation (the rate is undefined).
WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

}  // namespace convctx
