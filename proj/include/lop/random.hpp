#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lop {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Derives an independent seed for a named stream ("model", "data", "search", "train").
std::uint64_t stream_seed(std::uint64_t root_seed, std::string_view stream);
std::uint64_t stream_seed(std::uint64_t root_seed, std::string_view stream, std::uint64_t index);

// Seeded generator. Distribution transforms are written out here so that
// sequences do not depend on the standard library's distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lop
