#pragma once

#include <cmath>
#include <cstdint>

#include "sessrec/common.hpp"

namespace sessrec {

// Counter-based generator (splitmix64): the state is a counter stepped by a
// fixed gamma and the output is a hash of it. Every run owns its generators;
// there is no global RNG state anywhere in the library. `fork` derives an
// independent, reproducible substream from the construction seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(seed) {}

    std::uint64_t next_u64() {
        counter_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t x = counter_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; two fresh draws per call, no caching,
    // so the draw sequence is a pure function of the call count.
    double normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Independent substream derived from the original seed, not the current
    // counter, so forks are stable regardless of how much this stream was used.
    Rng fork(std::uint64_t salt) const { return Rng(mix64(seed_, salt)); }

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace sessrec
