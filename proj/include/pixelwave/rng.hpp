#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace pixelwave {

// Deterministic generator with a fully specified algorithm. We avoid the
// std <random> distributions because their output sequences are
// implementation-defined; reproducibility across platforms requires
// owning the uniform->normal mapping ourselves.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    // Derive an independent stream, e.g. per (step, purpose).
    Rng stream(uint64_t salt) const { return Rng(splitmix(state_ ^ (0xbf58476d1ce4e5b9ull * (salt + 1)))); }

    uint64_t next_u64() {
        // xorshift64* on a splitmix-seeded state
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n)
    uint64_t uniform_index(uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller (no cached spare: keeps the stream
    // position a pure function of the number of draws).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void fill_normal(std::vector<T>& v, double mean, double stddev) {
        for (auto& x : v) x = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_uniform(std::vector<T>& v, double lo, double hi) {
        for (auto& x : v) x = static_cast<T>(uniform(lo, hi));
    }

    uint64_t raw_state() const { return state_; }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t state_;
};

}  // namespace pixelwave
