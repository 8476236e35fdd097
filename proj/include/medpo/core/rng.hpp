#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace medpo {

// Portable deterministic randomness. std:: distributions are
// implementation-defined, so every draw the toolkit makes goes through here.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// FNV-1a, used to derive per-item seeds from string ids.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view id) noexcept {
    return mix_seed(seed, fnv1a(id));
}

/// Uniform in [0, 1) with 53 random bits.
constexpr double to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Standard normal from the counter (key, index); independent of call order.
inline double counter_normal(std::uint64_t key, std::uint64_t index) noexcept {
    std::uint64_t a = splitmix64(key ^ splitmix64(2 * index));
    std::uint64_t b = splitmix64(key ^ splitmix64(2 * index + 1));
    double u1 = 1.0 - to_unit(a);  // (0, 1]
    double u2 = to_unit(b);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential splitmix64 stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return to_unit(next()); }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept {
        // Lemire-style rejection keeps the draw unbiased.
        std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            std::uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    double normal() noexcept {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace medpo
