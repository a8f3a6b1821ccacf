#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace bridge {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform (reports the operation and both shapes).
struct ShapeError : Error {
    using Error::Error;
};

/// Bad user-supplied configuration; maps to exit code 1 in the CLI.
struct ConfigError : Error {
    using Error::Error;
};

/// Unrecoverable mid-run failure (non-finite gradients, broken invariants);
/// maps to exit code 2 in the CLI.
struct AbortError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the project flows through SplitMix64
// streams keyed by explicit (seed, index, purpose) mixes, so results do not
// depend on std library distribution internals or on worker scheduling.
// ---------------------------------------------------------------------------

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (0x9E3779B97F4A7C15ULL + (b << 1)));
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b), c);
}

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

    /// Standard normal via Box-Muller (spare cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform01();  // (0, 1]
        const double v = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * v);
        has_spare_ = true;
        return r * std::cos(two_pi * v);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v);

/// Draws `k` distinct indices from [0, n) in a seed-determined order.
std::vector<int> sample_distinct(int n, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// parallel_for: runs fn(i) for i in [0, n) on `workers` threads with a static
// stride schedule. Each index must be independent and self-seeded; outputs go
// to preallocated slots, so results are identical for any worker count.
// ---------------------------------------------------------------------------
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace bridge
