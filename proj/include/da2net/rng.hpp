#pragma once

#include <cstdint>
#include <limits>

namespace da2 {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Counter-based generator: the i-th draw of (seed, stream) is a pure function
/// of (seed, stream, i), so independent streams can be split off per sample
/// index without any ordering dependence between them.
///
/// Satisfies UniformRandomBitGenerator, so it plugs into <random> distributions.
class Rng {
   public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
        : seed_(seed), stream_(stream), key_(splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull))) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept { return splitmix64(key_ + splitmix64(counter_++)); }

    /// A generator on a derived stream. Does not advance this generator.
    Rng split(std::uint64_t substream) const noexcept {
        return Rng(seed_, splitmix64(stream_ * 0xD1B54A32D192ED03ull + substream + 1));
    }

    /// Uniform double in [0, 1).
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : (*this)() % n; }

    double normal(double mean = 0.0, double stddev = 1.0) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::uint64_t counter() const noexcept { return counter_; }

   private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace da2
