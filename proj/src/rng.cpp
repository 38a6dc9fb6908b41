#include "hyperlab/rng.hpp"

#include <cmath>

#include "hyperlab/errors.hpp"

namespace hyperlab {

namespace {
inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
}  // namespace

Rng Rng::stream(const std::string& name) const {
    uint64_t mix = state_ ^ fnv1a64(name);
    splitmix64(mix);
    return Rng(mix);
}

Rng Rng::stream(uint64_t index) const {
    uint64_t mix = state_ ^ (0x632be59bd9b4e019ull * (index + 1));
    splitmix64(mix);
    return Rng(mix);
}

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
    uniform_draws_++;
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
    if (n <= 0) throw InputError("uniform_int: n must be positive");
    uniform_draws_++;
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

double Rng::normal() {
    normal_draws_++;
    // Box-Muller; u1 nudged away from 0 so log() stays finite.
    double u1 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

std::vector<double> Rng::normal_vec(int n) {
    std::vector<double> out(static_cast<size_t>(n));
    for (auto& x : out) x = normal();
    return out;
}

int Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (total <= 0.0) throw InputError("categorical: weights must have positive mass");
    double r = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace hyperlab
