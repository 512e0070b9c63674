#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "varfilter/tensor.hpp"

namespace varfilter {

namespace detail {

// splitmix64; used both as a stream generator and to mix sub-stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic, platform-independent random stream. The distributions are
/// implemented directly (uniform from the top 53 bits, normal via Box-Muller)
/// so that a seed pins the exact sequence everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // One warm-up scramble so that small seeds diverge immediately.
        detail::splitmix64(state_);
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the spare draw is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    Tensor normal_vector(std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = normal();
        return Tensor::vector(std::move(v));
    }

    Tensor uniform_vector(std::size_t n, double lo, double hi) {
        std::vector<double> v(n);
        for (double& x : v) x = uniform(lo, hi);
        return Tensor::vector(std::move(v));
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Derive an independent sub-stream; mixing is order-sensitive so
    /// (a, b) and (b, a) give unrelated streams.
    static std::uint64_t sub_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                  std::uint64_t c = 0) {
        std::uint64_t s = base;
        detail::splitmix64(s);
        s ^= 0x2545f4914f6cdd1dULL + a;
        detail::splitmix64(s);
        s ^= 0x9e3779b97f4a7c15ULL * (b + 1);
        detail::splitmix64(s);
        s ^= 0xd1342543de82ef95ULL * (c + 1);
        detail::splitmix64(s);
        return s;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace varfilter
