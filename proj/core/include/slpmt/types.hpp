#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace slpmt {

enum class Tier { high, low };

inline std::string_view tier_name(Tier t) { return t == Tier::high ? "high" : "low"; }

inline Tier parse_tier(std::string_view s) {
  if (s == "high") return Tier::high;
  if (s == "low") return Tier::low;
  throw std::invalid_argument("unknown resource tier '" + std::string(s) + "'");
}

// Reserved vocabulary ids. Language symbols follow at kFirstLanguageSymbol.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstLanguageSymbol = 3;

// A padded single-direction batch. Source rows already begin with the
// target-language symbol; target_in is target_out shifted right behind BOS.
struct Batch {
  std::size_t rows = 0;
  std::size_t source_length = 0;
  std::size_t target_length = 0;
  std::vector<int> source;
  std::vector<int> target_in;
  std::vector<int> target_out;
  std::size_t language = 0;  // row in the model's language table

  std::size_t target_tokens() const {
    std::size_t n = 0;
    for (int id : target_out) n += id != kPadId;
    return n;
  }
};

}  // namespace slpmt
