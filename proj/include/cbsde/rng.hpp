#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cbsde {

using Rng = std::mt19937_64;

/// Engine for the substream identified by `ids` under a master seed.
///
/// Distinct id tuples give statistically independent engines, so work split
/// into substreams produces the same numbers regardless of execution order.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids = {}) {
    std::seed_seq::result_type words[16];
    std::size_t n = 0;
    words[n++] = static_cast<std::uint32_t>(seed);
    words[n++] = static_cast<std::uint32_t>(seed >> 32);
    for (auto id : ids) {
        if (n + 2 > 16) break;
        words[n++] = static_cast<std::uint32_t>(id);
        words[n++] = static_cast<std::uint32_t>(id >> 32);
    }
    std::seed_seq seq(words, words + n);
    return Rng(seq);
}

/// Stream ids used across the library, kept distinct so no two consumers share a substream.
namespace stream {
inline constexpr std::uint64_t paths = 1;
inline constexpr std::uint64_t eval_paths = 2;
inline constexpr std::uint64_t terminal = 3;
inline constexpr std::uint64_t init = 4;
inline constexpr std::uint64_t training = 5;
inline constexpr std::uint64_t facelift = 6;
inline constexpr std::uint64_t pricing = 7;
inline constexpr std::uint64_t run = 8;
} // namespace stream

} // namespace cbsde
