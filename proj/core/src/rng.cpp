#include "mlit/rng.hpp"

namespace mlit {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace

RngStream::RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double RngStream::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() { return normal_(engine_); }

std::int64_t RngStream::below(std::int64_t n) {
    if (n <= 1)
        return 0;
    // Rejection sampling keeps the draw unbiased.
    const auto un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = (~std::uint64_t{0} / un) * un;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return static_cast<std::int64_t>(v % un);
}

RngStream Rng::stream(std::string_view name, std::uint64_t index) const {
    return RngStream(splitmix64(splitmix64(seed_ ^ fnv1a(name)) + index));
}

} // namespace mlit
