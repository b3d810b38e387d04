#include "kvcomm/random.hpp"

#include <cmath>
#include <numbers>

namespace kvcomm {

std::uint64_t SplitMix64::below(std::uint64_t bound) noexcept {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % bound;
}

double SplitMix64::normal() noexcept {
    const double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

float keyed_normal(std::uint64_t seed, std::string_view name, std::uint64_t index) noexcept {
    const std::uint64_t key = mix64(seed ^ mix64(fnv1a64(name)));
    const std::uint64_t a = mix64(key + (2 * index + 1) * kGolden);
    const std::uint64_t b = mix64(key + (2 * index + 2) * kGolden);
    const double u1 = static_cast<double>((a >> 11) + 1) * 0x1.0p-53;
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

} // namespace kvcomm
