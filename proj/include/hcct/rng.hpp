#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "hcct/error.hpp"

namespace hcct {

// Counter-based deterministic generator: the i-th output is a pure function
// of (seed, i), so streams are reproducible across platforms and resumable
// by construction. The mixing function is the splitmix64 finalizer.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * ++counter_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) from the top 53 bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, bound) via fixed-point multiply; bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw ValueError("Rng::next_below: bound must be positive");
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
    }

    // Standard normal via Box-Muller; consumes two uniforms per call.
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
    double next_trunc_normal(double sigma) {
        for (;;) {
            double v = next_normal();
            if (v >= -2.0 && v <= 2.0) return v * sigma;
        }
    }

    // Deterministic Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Independent substream identified by a label and an index. Used so that
    // e.g. the shuffle of epoch 7 never depends on how many dropout values
    // earlier epochs consumed.
    Rng derive(std::string_view label, std::uint64_t index = 0) const {
        std::uint64_t h = 0xCBF29CE484222325ULL ^ seed_;
        for (char c : label) {
            h ^= static_cast<std::uint8_t>(c);
            h *= 0x100000001B3ULL;
        }
        h ^= index + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        return Rng(h);
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace hcct
