#ifndef FLOWCAST_RANDOM_HPP
#define FLOWCAST_RANDOM_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace flowcast {

// Deterministic random stream. Distribution transforms are implemented here
// (not via <random> distributions) so sequences are identical across standard
// library implementations, which the reproducibility contracts rely on.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; one spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Exponential with the given scale (mean).
    double exponential(double scale) { return -scale * std::log(1.0 - uniform()); }

    // Gamma(shape=1, scale) is exponential; only that case is needed here.
    double gamma_shape1(double scale) { return exponential(scale); }

    // Beta(1/2, 1/2) via the arcsine-law inverse CDF.
    double beta_half_half() {
        double s = std::sin(0.5 * M_PI * uniform());
        return s * s;
    }

    // Integer in [0, n): rejection-free modulo is fine for our n << 2^64 use.
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    // Child stream with a decorrelated seed; used for per-trajectory streams.
    static std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
        std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (index + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace flowcast

#endif
