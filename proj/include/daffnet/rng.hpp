#pragma once

// Seeded random source. Distribution algorithms are spelled out here rather
// than taken from <random> adapters, whose output is implementation-defined;
// mt19937_64 itself is fully specified, so streams are reproducible.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace daffnet {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (cosine branch only, keeping the state
    // a pure function of the engine)
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    std::uint64_t integer(std::uint64_t n) {
        return (std::uint64_t)(((__uint128_t)gen_() * n) >> 64);
    }

    template <class T>
    std::vector<T> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0) {
        std::vector<T> v(n);
        for (auto& x : v) x = (T)normal(mean, stddev);
        return v;
    }

    std::uint64_t raw() { return gen_(); }

    std::string state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace daffnet
