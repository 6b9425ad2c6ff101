#pragma once

#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace fedproj {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

/// Mixes a base seed with any number of integer or string tags into a new
/// seed. Streams derived from distinct tag sequences are independent in
/// practice and do not depend on the order in which they are created.
class SeedSeq {
public:
    explicit constexpr SeedSeq(std::uint64_t base) : state_(detail::splitmix64(base)) {}

    constexpr SeedSeq then(std::uint64_t tag) const {
        return SeedSeq(state_ ^ detail::splitmix64(tag + 0x632be59bd9b4e019ULL), 0);
    }
    constexpr SeedSeq then(std::string_view tag) const { return then(detail::fnv1a(tag)); }

    constexpr std::uint64_t value() const { return state_; }
    Rng engine() const { return Rng(state_); }

private:
    constexpr SeedSeq(std::uint64_t mixed, int) : state_(detail::splitmix64(mixed)) {}
    std::uint64_t state_;
};

/// Uniform double on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer on [0, n) by rejection; n > 0.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = rng();
    while (x >= limit) {
        x = rng();
    }
    return x % n;
}

template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_below(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(idx), rng);
    return idx;
}

}  // namespace fedproj
