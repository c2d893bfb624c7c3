#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sshield {

// Every stochastic stage (init, shuffling, layer selection, trace generation)
// draws from its own stream keyed by (seed, stream tag, indices). Streams use
// std::mt19937_64 (bit-exact per the standard); the variate transforms below
// are hand-rolled so results do not depend on the standard library's
// unspecified distribution algorithms.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed) { return splitmix64(seed); }

template <typename... Rest>
uint64_t mix_seed(uint64_t seed, uint64_t part, Rest... rest) {
    return mix_seed(splitmix64(seed ^ (part + 0x632be59bd9b4e019ULL)), rest...);
}

// Stream tags.
inline constexpr uint64_t kStreamInit = 0x01;
inline constexpr uint64_t kStreamShuffle = 0x02;
inline constexpr uint64_t kStreamSelect = 0x03;
inline constexpr uint64_t kStreamEval = 0x04;
inline constexpr uint64_t kStreamTrace = 0x05;
inline constexpr uint64_t kStreamCalib = 0x06;

class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    float uniform_float() { return static_cast<float>(uniform()); }

    // Uniform integer in [0, n). Rejection keeps the draw unbiased.
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    bool coin() { return (gen_() & 1) != 0; }

    // +1 or -1 with equal probability.
    float sign() { return coin() ? 1.0f : -1.0f; }

    // Box-Muller; the spare value is cached so draws come in a fixed order.
    double normal(double mean = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + sigma * spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + sigma * r * std::cos(theta);
    }

    // Fisher-Yates over an index container.
    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sshield
