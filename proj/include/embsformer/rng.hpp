#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace embs {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based generator: the i-th draw of (seed, stream) is a pure function
/// of (seed, stream, i), so sequences are identical on every platform.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t next_u64() { return mix64(key_ + counter_++ * 0x9e3779b97f4a7c15ULL); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller (one draw per pair, no caching).
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of 0..n-1 keyed by (seed, epoch).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

}  // namespace embs
