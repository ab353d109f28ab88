#pragma once

#include <string>
#include <vector>

#include "convctx/tensor.hpp"

namespace convctx {

// Reserved token ids shared by every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

// One utterance: features [T, F] plus its target token ids (no BOS/EOS).
struct Utterance {
    std::string id;
    Tensor features;
    std::vector<int> tokens;
};

using Dataset = std::vector<Utterance>;

}  // namespace convctx
