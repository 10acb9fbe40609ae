#pragma once

#include <cstdint>
#include <vector>

namespace cliptune {

// Deterministic random stream: xoshiro256++ seeded through splitmix64.
// Both generators are fully specified by their published constants, so a
// given seed yields the same byte sequence on every platform and run.
// Platform library generators are deliberately not used anywhere.
//
// splitmix64: state += 0x9E3779B97F4A7C15; z = state;
//             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//             z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//             return z ^ (z >> 31)
// xoshiro256++: result = rotl(s0 + s3, 23) + s0, with the standard
//               xoshiro256 state transition.
class RngStream {
public:
    explicit RngStream(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1), 53-bit mantissa.
    double next_uniform();

    // Standard normal via Box-Muller (second deviate of each pair cached).
    double next_gaussian();

    std::vector<double> gaussian_vector(std::size_t n);

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cliptune
