#pragma once

#include <cstdint>
#include <random>

namespace biss {

// Stream tags keep independent randomness consumers (data order, dropout,
// strategy sampling, parameter init) from ever sharing draws. Replacing one
// consumer never shifts the others.
enum class RngStream : std::uint64_t {
    kInit = 1,
    kDataOrder = 2,
    kDropout = 3,
    kStrategy = 4,
};

// splitmix64 finalizer
inline std::uint64_t mix_bits(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, RngStream stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t h = mix_bits(seed);
    h = mix_bits(h ^ static_cast<std::uint64_t>(stream));
    h = mix_bits(h ^ a);
    h = mix_bits(h ^ b);
    h = mix_bits(h ^ c);
    return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, RngStream stream,
                                std::uint64_t a = 0, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
    return std::mt19937_64(derive_seed(seed, stream, a, b, c));
}

}  // namespace biss
