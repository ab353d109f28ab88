#pragma once

#include <string>
#include <vector>

#include "convctx/model.hpp"
#include "convctx/text.hpp"

namespace convctx {

struct Hypothesis {
    std::vector<int> tokens;  // BOS-prefixed; EOS-terminated iff finished
    double score = 0.0;       // cumulative log-probability
    bool finished = false;
};

// Deterministic total order: higher score first, then lexicographically
// smaller token sequence.
bool hyp_before(const Hypothesis& a, const Hypothesis& b);

// Safety bound used when no explicit max_len is configured.
int default_max_len(int memory_len);

// Left-to-right beam search over raw summed log-probabilities (no length
// normalization). Returns the n-best list, best first: all finished
// hypotheses found (pruned to the beam width), or, if none finished within
// max_len, the single best unfinished hypothesis flagged as such.
std::vector<Hypothesis> beam_search(const Model& model, const Tensor& memory, int beam,
                                    int max_len);

// Argmax per step with the same tie rule; equals beam_search with beam 1.
Hypothesis greedy_decode(const Model& model, const Tensor& memory, int max_len);

// One hypothesis record: "<id>\t<score>\t<detokenized text>".
std::string format_hypothesis(const std::string& id, const Hypothesis& hyp,
                              const Vocab& vocab);

}  // namespace convctx
