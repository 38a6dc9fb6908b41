#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hyperlab {

// Counter-based PRNG (splitmix64 core). std::mt19937 + std::*_distribution
// would not be bit-stable across standard libraries, and artifact hashes must
// reproduce anywhere, so both the generator and the distributions are pinned
// here. Draws are counted by kind; the distillation loops use the counters to
// audit which phases consumed fresh noise.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Independent child stream, e.g. one per sequence or per training phase.
    Rng stream(const std::string& name) const;
    Rng stream(uint64_t index) const;

    uint64_t next_u64();

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform();
    double uniform(double lo, double hi);
    // Uniform integer in [0, n).
    int uniform_int(int n);
    // Standard normal via Box-Muller (counts as one noise draw).
    double normal();
    std::vector<double> normal_vec(int n);

    // Pick an index according to (unnormalized) nonnegative weights.
    int categorical(const std::vector<double>& weights);

    uint64_t uniform_draws() const { return uniform_draws_; }
    uint64_t normal_draws() const { return normal_draws_; }

private:
    uint64_t state_;
    uint64_t uniform_draws_ = 0;
    uint64_t normal_draws_ = 0;
};

// FNV-1a over raw bytes; the stable content hash used for configs and
// checkpoint lineage.
uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);

}  // namespace hyperlab
