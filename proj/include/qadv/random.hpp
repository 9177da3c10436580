#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace qadv {

// Platform-independent draws on top of std::mt19937_64. The standard
// distributions are implementation defined, which would break
// byte-identical reports across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    // +1 or -1 with equal probability.
    double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    // k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Independent stream for (seed, index); used to give each example its own
// generator so parallel and serial runs agree.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace qadv
