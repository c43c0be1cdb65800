#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace hemosbi {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derive an independent stream seed from a base seed and a path of indices,
/// so per-item randomness does not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path)
{
    std::uint64_t s = splitmix64(base);
    for (auto p : path)
        s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
    return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> path = {})
{
    return Rng(derive_seed(base, path));
}

// Stream tags, so the same index used by two subsystems never collides.
namespace stream {
inline constexpr std::uint64_t prior = 1;
inline constexpr std::uint64_t split = 2;
inline constexpr std::uint64_t crop = 3;
inline constexpr std::uint64_t noise = 4;
inline constexpr std::uint64_t init = 5;
inline constexpr std::uint64_t batch = 6;
inline constexpr std::uint64_t posterior = 7;
inline constexpr std::uint64_t toy = 8;
inline constexpr std::uint64_t validation = 9;
inline constexpr std::uint64_t test = 10;
inline constexpr std::uint64_t train = 11;
inline constexpr std::uint64_t laplace = 12;
} // namespace stream

} // namespace hemosbi
