#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>

namespace mlit {

/// Independent, reproducible random source.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal.
    double normal();
    /// Uniform integer in [0, n).
    std::int64_t below(std::int64_t n);

    template <class It>
    void shuffle(It first, It last) {
        const auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            auto j = below(static_cast<std::int64_t>(i) + 1);
            std::iter_swap(first + i, first + j);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

namespace streams {
inline constexpr std::string_view init = "init";
inline constexpr std::string_view gate_noise = "gate-noise";
inline constexpr std::string_view dropout = "dropout";
inline constexpr std::string_view masking = "masking";
inline constexpr std::string_view data_order = "data-order";
inline constexpr std::string_view augment = "augment";
} // namespace streams

/// Root generator. Named sub-streams are derived from (seed, name, index) so each
/// source of randomness can be replayed on its own, e.g. per epoch.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}
    std::uint64_t seed() const noexcept { return seed_; }
    RngStream stream(std::string_view name, std::uint64_t index = 0) const;

private:
    std::uint64_t seed_;
};

} // namespace mlit
