// Keyed random streams.
//
// Every random draw in the library comes from an engine seeded by
// (master seed, stream id, index). Paths, particles steps and chains get
// their own engine, so results do not depend on evaluation order or on
// the number of worker threads.
#pragma once

#include <cstdint>
#include <limits>
#include <random>

namespace ebds {

/// Stream identifiers. Distinct ids never share noise for a master seed.
enum class Stream : std::uint64_t {
    Coupled = 1,
    Latent = 2,
    Evaluation = 3,
    ParticleFilter = 4,
    Hmc = 5,
    KldSampling = 6,
    NetworkInit = 7,
    Shuffle = 8,
    ValidationSplit = 9,
    ImportanceSampling = 10,
    Diagnostic = 11,
};

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0,
                                    std::uint64_t sub = 0) {
    std::uint64_t h = mix64(master);
    h = mix64(h ^ static_cast<std::uint64_t>(stream));
    h = mix64(h ^ index);
    return mix64(h ^ sub);
}

/// Small-state engine (8 bytes) meeting UniformRandomBitGenerator, so one
/// engine per path stays cheap for a million paths.
class SplitMix64 {
  public:
    using result_type = std::uint64_t;

    explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    std::uint64_t state_;
};

/// Engine plus normal distribution, the unit of per-path randomness.
struct GaussianSource {
    explicit GaussianSource(std::uint64_t seed) : engine(seed) {}
    double operator()() { return normal(engine); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine); }

    SplitMix64 engine;
    std::normal_distribution<double> normal{0.0, 1.0};
};

inline GaussianSource keyed_source(std::uint64_t master, Stream stream, std::uint64_t index = 0,
                                   std::uint64_t sub = 0) {
    return GaussianSource(derive_seed(master, stream, index, sub));
}

} // namespace ebds
