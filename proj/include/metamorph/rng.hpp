#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace metamorph {

// Counter-based deterministic random stream. Each draw hashes
// (seed, counter++) through a SplitMix64 finalizer, so a stream is fully
// described by two integers and identical (seed, counter) pairs always
// reproduce the same values, independent of platform or thread count.
// Sub-tasks get independent streams via split().
class RngStream {
public:
    RngStream() : seed_(0), counter_(0) {}
    explicit RngStream(uint64_t seed) : seed_(seed), counter_(0) {}
    RngStream(uint64_t seed, uint64_t counter) : seed_(seed), counter_(counter) {}

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (counter_++ + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        // rejection sampling to avoid modulo bias
        uint64_t threshold = (~uint64_t(0) - n + 1) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (two uniform draws per call pair).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Independent child stream; distinct tags yield distinct streams and the
    // parent is not advanced.
    RngStream split(uint64_t tag) const {
        uint64_t z = seed_ ^ (0x632be59bd9b4e019ULL * (tag + 1));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return RngStream(z ^ (z >> 31));
    }

    RngStream split(std::string_view name) const {
        uint64_t h = 1469598103934665603ULL;  // FNV-1a
        for (char c : name) {
            h ^= uint64_t(uint8_t(c));
            h *= 1099511628211ULL;
        }
        return split(h);
    }

private:
    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace metamorph
