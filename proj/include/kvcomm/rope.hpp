#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvcomm {

/// Rotary position embedding over d-dimensional head vectors. Pair i is
/// (2i, 2i+1), rotated by position * base^(-2i/d). Angles and the 2x2
/// products are evaluated in double so R_a R_b = R_{a+b} holds to float
/// rounding even at large |position|.
class Rope {
public:
    Rope(std::size_t head_dim, double base);

    std::size_t head_dim() const { return inv_freq_.size() * 2; }

    /// Rotates one head vector in place. Negative positions de-rotate.
    void rotate(std::span<float> vec, std::int64_t position) const;

    /// Rotates every head of a concatenated (heads * head_dim) row.
    void rotate_heads(std::span<float> row, std::int64_t position) const;

private:
    std::vector<double> inv_freq_;
};

/// Out-of-place convenience used by tests and the analysis code.
std::vector<float> rope_rotate(std::span<const float> vec, std::int64_t position, double base = 10000.0);

} // namespace kvcomm
