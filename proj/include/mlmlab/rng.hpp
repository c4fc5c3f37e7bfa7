#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "mlmlab/errors.hpp"

namespace mlmlab {

// Seeded random source. mt19937_64 output is pinned by the standard; the
// distribution transforms are written out here because the std:: ones are
// implementation-defined, which would break bit-reproducibility of runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t raw() { return eng_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // integer in [0, n)
    int64_t below(int64_t n) {
        require(n > 0, "Rng::below: n must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r = 0;
        do {
            r = eng_();
        } while (r >= limit);
        return static_cast<int64_t>(r % un);
    }

    bool coin() { return (eng_() & 1u) != 0; }

    // Marsaglia-Tsang; alpha < 1 handled via the boost trick
    double gamma(double alpha) {
        require(alpha > 0.0, "Rng::gamma: alpha must be positive");
        if (alpha < 1.0) {
            double u = 0.0;
            do {
                u = uniform();
            } while (u <= 0.0);
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double t = 1.0 + c * x;
            if (t <= 0.0) continue;
            double vcube = t * t * t;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * vcube;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - vcube + std::log(vcube)))
                return d * vcube;
        }
    }

    std::vector<double> dirichlet(size_t k, double concentration) {
        std::vector<double> out(k);
        double sum = 0.0;
        for (auto& x : out) {
            x = gamma(concentration);
            sum += x;
        }
        for (auto& x : out) x /= sum;
        return out;
    }

    // index sampled proportionally to non-negative weights
    int64_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        require(total > 0.0, "Rng::categorical: weights sum to zero");
        double r = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (r < acc) return static_cast<int64_t>(i);
        }
        return static_cast<int64_t>(weights.size() - 1);
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (int64_t i = static_cast<int64_t>(xs.size()) - 1; i > 0; --i) {
            int64_t j = below(i + 1);
            std::swap(xs[static_cast<size_t>(i)], xs[static_cast<size_t>(j)]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used to derive independent substreams from one run seed.
inline uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 1469598103934665603ull;
    for (char c : tag) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t seed, std::string_view stream, uint64_t index = 0) {
    uint64_t z = seed ^ hash_tag(stream) ^ (0x9e3779b97f4a7c15ull * (index + 1));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace mlmlab
