#include "convctx/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace convctx {

bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
}

int default_max_len(int memory_len) { return 2 * memory_len + 10; }

namespace {

// Log-probabilities over the vocabulary for the next step of one prefix.
std::vector<double> next_logprobs(const Model& model, const Tensor& memory,
                                  const std::vector<int>& prefix) {
    Tensor logits = model.decoder_logits(memory, prefix);
    const int U = logits.extent(0), V = logits.extent(1);
    auto lv = logits.values();
    const double* row = lv.data() + static_cast<std::int64_t>(U - 1) * V;
    double max = row[0];
    for (int v = 1; v < V; ++v) max = std::max(max, row[v]);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - max);
    const double log_z = max + std::log(sum);
    std::vector<double> out(static_cast<std::size_t>(V));
    for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(v)] = row[v] - log_z;
    return out;
}

}  // namespace

std::vector<Hypothesis> beam_search(const Model& model, const Tensor& memory, int beam,
                                    int max_len) {
    if (beam < 1) throw ContractError("beam_search: beam must be >= 1");
    if (max_len < 1) throw ContractError("beam_search: max_len must be >= 1");
    NoGradGuard guard;

    std::vector<Hypothesis> live{{{kBosId}, 0.0, false}};
    std::vector<Hypothesis> finished;
    for (int step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hypothesis> candidates;
        for (const Hypothesis& h : live) {
            const std::vector<double> lp = next_logprobs(model, memory, h.tokens);
            for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
                Hypothesis next = h;
                next.tokens.push_back(v);
                next.score += lp[static_cast<std::size_t>(v)];
                next.finished = v == kEosId;
                candidates.push_back(std::move(next));
            }
        }
        std::sort(candidates.begin(), candidates.end(), hyp_before);
        if (static_cast<int>(candidates.size()) > beam) candidates.resize(static_cast<std::size_t>(beam));
        live.clear();
        for (Hypothesis& c : candidates) {
            (c.finished ? finished : live).push_back(std::move(c));
        }
        std::sort(finished.begin(), finished.end(), hyp_before);
        if (static_cast<int>(finished.size()) > beam) finished.resize(static_cast<std::size_t>(beam));
    }
    if (!finished.empty()) return finished;
    // Nothing reached EOS: surface the best partial, flagged.
    std::sort(live.begin(), live.end(), hyp_before);
    return {live.front()};
}

Hypothesis greedy_decode(const Model& model, const Tensor& memory, int max_len) {
    if (max_len < 1) throw ContractError("greedy_decode: max_len must be >= 1");
    NoGradGuard guard;
    Hypothesis hyp{{kBosId}, 0.0, false};
    for (int step = 0; step < max_len; ++step) {
        const std::vector<double> lp = next_logprobs(model, memory, hyp.tokens);
        int best = 0;
        for (int v = 1; v < static_cast<int>(lp.size()); ++v) {
            if (lp[static_cast<std::size_t>(v)] > lp[static_cast<std::size_t>(best)]) best = v;
        }
        hyp.tokens.push_back(best);
        hyp.score += lp[static_cast<std::size_t>(best)];
        if (best == kEosId) {
            hyp.finished = true;
            break;
        }
    }
    return hyp;
}

std::string format_hypothesis(const std::string& id, const Hypothesis& hyp,
                              const Vocab& vocab) {
    // A weak model can emit reserved ids mid-sequence; drop them rather than
    // reject the record, decode() would refuse the raw sequence.
    std::vector<int> ids{kBosId};
    for (int t : hyp.tokens) {
        if (t != kPadId && t != kBosId && t != kEosId) ids.push_back(t);
    }
    ids.push_back(kEosId);
    char score[32];
    std::snprintf(score, sizeof score, "%.6f", hyp.score);
    return id + "\t" + score + "\t" + decode(ids, vocab);
}

}  // namespace convctx
