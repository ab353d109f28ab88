#include "convctx/text.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace convctx {

namespace {

const char* kReservedSymbols[kNumReservedIds] = {"<pad>", "<bos>", "<eos>", "<unk>"};

// Match table rebuilt on demand; vocabularies are small and long-lived.
struct Matcher {
    std::unordered_map<std::string, int> unit_to_id;
    std::size_t max_unit_len = 0;
};

Matcher build_matcher(const Vocab& v) {
    Matcher m;
    for (int id = kNumReservedIds; id < v.size(); ++id) {
        const std::string& s = v.symbol_of(id);
        m.unit_to_id.emplace(s, id);
        m.max_unit_len = std::max(m.max_unit_len, s.size());
    }
    return m;
}

std::size_t utf8_advance(const std::string& s, std::size_t pos) {
    ++pos;
    while (pos < s.size() && (static_cast<unsigned char>(s[pos]) & 0xc0) == 0x80) ++pos;
    return pos;
}

}  // namespace

Vocab Vocab::from_units(const std::vector<std::string>& units, const std::string& boundary) {
    Vocab v;
    v.boundary_ = boundary;
    for (const char* r : kReservedSymbols) v.symbols_.emplace_back(r);
    std::unordered_set<std::string> seen(v.symbols_.begin(), v.symbols_.end());
    for (const std::string& u : units) {
        if (u.empty()) throw InputError("vocab: empty unit");
        if (!seen.insert(u).second) {
            throw InputError("vocab: unit '" + u + "' duplicates an earlier symbol");
        }
        v.symbols_.push_back(u);
    }
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocab file '" + path + "'");
    std::string boundary = "▁";
    std::vector<std::string> units;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (first && line.rfind("#boundary ", 0) == 0) {
            boundary = line.substr(10);
            if (boundary.empty()) {
                throw InputError("vocab file '" + path + "': empty boundary marker");
            }
            first = false;
            continue;
        }
        first = false;
        if (line.empty()) continue;
        units.push_back(line);
    }
    return from_units(units, boundary);
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write vocab file '" + path + "'");
    out << "#boundary " << boundary_ << "\n";
    for (int id = kNumReservedIds; id < size(); ++id) out << symbols_[static_cast<std::size_t>(id)] << "\n";
    if (!out) throw InputError("failed writing vocab file '" + path + "'");
}

int Vocab::id_of(const std::string& symbol) const {
    auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
    return it == symbols_.end() ? kUnkId : static_cast<int>(it - symbols_.begin());
}

const std::string& Vocab::symbol_of(int id) const {
    if (id < 0 || id >= size()) {
        throw InputError("vocab: id " + std::to_string(id) + " outside [0, " +
                         std::to_string(size()) + ")");
    }
    return symbols_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> words;
    std::string w;
    while (in >> w) words.push_back(std::move(w));
    return words;
}

std::vector<int> encode(const std::string& text, const Vocab& vocab) {
    const Matcher m = build_matcher(vocab);
    std::vector<int> ids{kBosId};
    for (const std::string& word : split_words(text)) {
        const std::string s = vocab.boundary() + word;
        std::size_t pos = 0;
        while (pos < s.size()) {
            int id = kUnkId;
            std::size_t matched = 0;
            const std::size_t limit = std::min(m.max_unit_len, s.size() - pos);
            for (std::size_t len = limit; len >= 1; --len) {
                auto it = m.unit_to_id.find(s.substr(pos, len));
                if (it != m.unit_to_id.end()) {
                    id = it->second;
                    matched = len;
                    break;
                }
            }
            if (matched == 0 && s.compare(pos, vocab.boundary().size(), vocab.boundary()) == 0) {
                // the synthetic marker itself never costs an unk
                pos += vocab.boundary().size();
                continue;
            }
            ids.push_back(id);
            pos = matched > 0 ? pos + matched : utf8_advance(s, pos);
        }
    }
    ids.push_back(kEosId);
    return ids;
}

std::string decode(const std::vector<int>& ids, const Vocab& vocab) {
    std::string glued;
    std::size_t i = 0;
    if (i < ids.size() && ids[i] == kBosId) ++i;
    bool ended = false;
    for (; i < ids.size(); ++i) {
        const int id = ids[i];
        if (ended) {
            throw InputError("decode: token after eos at position " + std::to_string(i));
        }
        if (id == kEosId) {
            ended = true;
            continue;
        }
        if (id == kPadId || id == kBosId) {
            throw InputError("decode: reserved id " + std::to_string(id) +
                             " inside the sequence at position " + std::to_string(i));
        }
        glued += vocab.symbol_of(id);
    }
    // Boundary markers become spaces; a leading marker opens the first word.
    std::string text;
    std::size_t pos = 0;
    const std::string& b = vocab.boundary();
    while (pos < glued.size()) {
        if (glued.compare(pos, b.size(), b) == 0) {
            if (!text.empty()) text += ' ';
            pos += b.size();
        } else {
            text += glued[pos];
            ++pos;
        }
    }
    return text;
}

std::vector<std::string> words_of(const std::vector<int>& ids, const Vocab& vocab) {
    return split_words(decode(ids, vocab));
}

WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    if (ref.empty()) throw ContractError("wer: empty reference");
    const int R = static_cast<int>(ref.size());
    const int H = static_cast<int>(hyp.size());
    struct Cell {
        int cost, s, i, d;
    };
    std::vector<Cell> dp(static_cast<std::size_t>(R + 1) * (H + 1));
    auto at = [&](int r, int h) -> Cell& { return dp[static_cast<std::size_t>(r) * (H + 1) + h]; };
    at(0, 0) = {0, 0, 0, 0};
    for (int r = 1; r <= R; ++r) at(r, 0) = {r, 0, 0, r};
    for (int h = 1; h <= H; ++h) at(0, h) = {h, 0, h, 0};
    for (int r = 1; r <= R; ++r) {
        for (int h = 1; h <= H; ++h) {
            const bool same = ref[static_cast<std::size_t>(r - 1)] == hyp[static_cast<std::size_t>(h - 1)];
            Cell diag = at(r - 1, h - 1);
            diag.cost += same ? 0 : 1;
            diag.s += same ? 0 : 1;
            Cell del = at(r - 1, h);
            del.cost += 1;
            del.d += 1;
            Cell ins = at(r, h - 1);
            ins.cost += 1;
            ins.i += 1;
            Cell best = diag;
            if (del.cost < best.cost) best = del;
            if (ins.cost < best.cost) best = ins;
            at(r, h) = best;
        }
    }
    const Cell final = at(R, H);
    WerBreakdown out;
    out.substitutions = final.s;
    out.insertions = final.i;
    out.deletions = final.d;
    out.ref_len = R;
    out.rate = static_cast<double>(final.cost) / R;
    return out;
}

}  // namespace convctx
