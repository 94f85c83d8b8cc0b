#pragma once

#include <cstdint>
#include <random>

namespace denseshift {

// Deterministic RNG. Streams derive from a master seed plus a stream id so
// that e.g. weight init and batch shuffling do not share a sequence.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    static Rng for_stream(uint64_t seed, uint64_t stream) {
        // splitmix64 of the pair; keeps distinct streams uncorrelated.
        uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

    double normal(double mean, double stddev) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) { // inclusive bounds
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace denseshift
