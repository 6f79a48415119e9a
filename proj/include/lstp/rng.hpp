#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lstp {

/// Counter-based stream derivation: (seed, purpose tag, index) -> independent
/// engine. Streams never depend on the order in which they are requested.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index);

inline std::mt19937_64 make_stream(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  return std::mt19937_64(mix_seed(seed, tag, index));
}

}  // namespace lstp
