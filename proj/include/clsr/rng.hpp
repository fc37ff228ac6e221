#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace clsr {

// splitmix64: used to derive independent seeds from (seed, tag) pairs so that
// every random stream in a run is a pure function of the run seed.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return derive_seed(seed, fnv1a(tag));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
    return splitmix64(derive_seed(seed, tag) ^ splitmix64(index * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::mt19937_64 make_engine(uint64_t seed) { return std::mt19937_64(seed); }

// Unbiased draw in [0, bound) from the raw engine stream, independent of the
// standard library's distribution internals.
inline uint64_t draw_below(std::mt19937_64& eng, uint64_t bound) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x = eng();
    while (x >= limit) x = eng();
    return x % bound;
}

// Uniform double in [0, 1) from the top 53 bits.
inline double draw_unit(std::mt19937_64& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Fisher-Yates with draw_below, so orderings are stable across toolchains.
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::mt19937_64& eng) {
    for (size_t i = items.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(draw_below(eng, i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace clsr
