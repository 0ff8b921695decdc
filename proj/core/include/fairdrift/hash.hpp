#pragma once

// FNV-1a fingerprints for manifests and reproducibility checks. These are
// equality fingerprints, not cryptographic digests: two runs are declared
// bit-identical when the hashes of their parameter blocks match.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace fairdrift {

constexpr std::uint64_t fnv_offset = 0xcbf29ce484222325ull;
constexpr std::uint64_t fnv_prime = 0x100000001b3ull;

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = fnv_offset) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= fnv_prime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = fnv_offset) {
    for (unsigned char b : text) {
        h ^= b;
        h *= fnv_prime;
    }
    return h;
}

// Hash of the little-endian byte image of a double sequence. The checkpoint
// format stores parameters the same way, so this matches what lands on disk.
inline std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = fnv_offset) {
    for (double v : values) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        unsigned char raw[8];
        std::memcpy(raw, &bits, 8);
        h = fnv1a(std::span<const unsigned char>(raw, 8), h);
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    static const char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace fairdrift
