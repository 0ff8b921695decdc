#pragma once

// Self-contained pseudo-random generator. The standard <random> engines are
// portable but the distributions are not (libstdc++ and libc++ disagree), and
// every artifact this library writes is supposed to be reproducible from the
// seeds recorded in its manifest. So the generator and the distributions both
// live here: xoshiro256++ for the stream, splitmix64 for seeding and for
// deriving independent substreams from (seed, tag) pairs.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace fairdrift {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Stable 64-bit mix of a seed with a textual tag, used to keep the streams for
// "init", "shuffle", "data", ... independent without a table of magic offsets.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = seed ^ 0x51'7c'c1'b7'27'22'0a'95ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::uint64_t s = h;
    return splitmix64(s);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    std::uint64_t s = derive_seed(seed, tag) ^ (0x9e3779b97f4a7c15ull * (index + 1));
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits, exactly representable.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n). Rejection on the top of the 64-bit range;
    // the loop terminates with overwhelming probability on the first draw.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t draw = next_u64();
        while (draw >= limit) draw = next_u64();
        return draw % n;
    }

    // Standard normal via Box-Muller. The spare value is cached, so a single
    // stream yields the same sequence no matter how calls are batched.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Identity permutation of length n shuffled by a dedicated stream. Used by the
// permuted reduction policy; the result depends on (seed, n) only.
inline std::vector<std::uint32_t> seeded_permutation(std::uint64_t seed, std::size_t n) {
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    Rng rng(derive_seed(seed, "permutation", n));
    rng.shuffle(order);
    return order;
}

} // namespace fairdrift
