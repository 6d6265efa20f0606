#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace hmdc {

/// Seeded random stream used for every sampling decision in the pipeline.
/// Draws are produced from raw mt19937_64 output so sequences do not depend
/// on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, n). n must be positive.
    std::int64_t uniform_index(std::int64_t n);

    /// Uniform double in [0, 1).
    double uniform01();

    bool bernoulli(double p) { return uniform01() < p; }

    /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
    std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);

    /// Independent child stream; the parent advances by one draw.
    Rng split() { return Rng(next_u64()); }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
};

} // namespace hmdc
