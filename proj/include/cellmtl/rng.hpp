#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cellmtl {

/// Deterministic generator (mt19937_64). Distributions are derived from the raw
/// 64-bit stream here rather than through <random> distribution objects, whose
/// output differs between standard library implementations.
class Rng {
public:
    static constexpr std::string_view kAlgorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) { }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }
    /// Standard normal via Box-Muller; every call consumes exactly two uniforms.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

/// Mixes a base seed with a string key (e.g. a record id) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t base, std::string_view key);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t key);

} // namespace cellmtl
