#pragma once

// Token vocabulary shared by the task generators, the reward rule and the
// policy. Query and answer tokens live in one id space.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dvrp {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;
using TokenSpan = std::span<const TokenId>;

namespace tokens {

inline constexpr TokenId kEos = 0;
inline constexpr TokenId kSep = 1;
inline constexpr TokenId kDigit0 = 2;  // digits 0..9 occupy 2..11
inline constexpr TokenId kRed = 12;
inline constexpr TokenId kGreen = 13;
inline constexpr TokenId kBlue = 14;
inline constexpr TokenId kYellow = 15;
inline constexpr TokenId kLeft = 16;
inline constexpr TokenId kRight = 17;
inline constexpr TokenId kQueryCount = 18;
inline constexpr TokenId kQueryMajority = 19;
inline constexpr TokenId kQueryCompare = 20;
inline constexpr TokenId kQueryShortcut = 21;
inline constexpr TokenId kDifficulty0 = 22;  // difficulty levels 0..2 occupy 22..24
inline constexpr std::uint32_t kDifficultyLevels = 3;
inline constexpr std::uint32_t kVocabSize = 25;

constexpr TokenId digit(std::uint32_t d) { return kDigit0 + d; }
constexpr TokenId color(std::uint32_t i) { return kRed + i; }
constexpr TokenId difficulty(std::uint32_t d) { return kDifficulty0 + d; }

std::string name(TokenId id);
std::string render(TokenSpan seq);

}  // namespace tokens
}  // namespace dvrp
