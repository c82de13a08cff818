#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mtp {

using TokenId = std::int32_t;

// Sentinel for target_ids at unsupervised slots. Never a valid token id.
inline constexpr TokenId kIgnoreTarget = -1;

// splitmix64, used to derive independent per-(seed,step,item) streams so
// resumed runs replay the exact randomness of the original run.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(seed ^ 0x6d74706b69740000ull);  // "mtpkit"
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                                std::uint64_t c = 0) {
    return std::mt19937_64(derive_seed(seed, a, b, c));
}

// FNV-1a over raw bytes; used for parameter fingerprints (frozen-teacher checks).
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace mtp
