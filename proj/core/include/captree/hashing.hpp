#pragma once

#include <cstdint>
#include <string_view>

namespace captree {

// Stable 64-bit FNV-1a. Unlike std::hash the value is identical across
// platforms and runs, which sharding and the mock backend depend on.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Maps a 64-bit value to [-1, 1] using its top 53 bits.
constexpr double unit_interval_signed(std::uint64_t x) noexcept {
    return static_cast<double>(x >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

}  // namespace captree
