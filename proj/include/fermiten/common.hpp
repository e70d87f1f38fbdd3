#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ftn {

// Raised when a persisted artifact (checkpoint, tensor file, ...) fails
// structural validation. Maps to exit code 3 at the CLI boundary.
class CorruptStateError : public std::runtime_error {
public:
    explicit CorruptStateError(const std::string &msg) : std::runtime_error(msg) {}
};

// Raised for runtime numerical failures (singular gauge, non-convergence).
// Maps to exit code 4 at the CLI boundary.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string &msg) : std::runtime_error(msg) {}
};

// splitmix64 step; used to derive independent sub-seeds from one master seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG wrapper. All transforms are hand-rolled on top of the
// mt19937_64 bit stream so that sequences do not depend on the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t bits() { return eng_(); }

    double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int64_t below(int64_t n) {
        // rejection on the top range keeps the result unbiased
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    template <class T> void shuffle(std::vector<T> &v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i)
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(below(i + 1))]);
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace ftn
