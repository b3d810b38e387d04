#include "kvcomm/rope.hpp"

#include "kvcomm/error.hpp"

#include <cmath>

namespace kvcomm {

Rope::Rope(std::size_t head_dim, double base) {
    if (head_dim == 0 || head_dim % 2 != 0) throw ShapeError("rope head_dim must be even");
    inv_freq_.resize(head_dim / 2);
    for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
        inv_freq_[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
}

void Rope::rotate(std::span<float> vec, std::int64_t position) const {
    if (vec.size() != head_dim()) throw ShapeError("rope: vector size does not match head_dim");
    if (position == 0) return;
    const auto pos = static_cast<double>(position);
    for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
        const double angle = pos * inv_freq_[i];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double x = vec[2 * i];
        const double y = vec[2 * i + 1];
        vec[2 * i] = static_cast<float>(x * c - y * s);
        vec[2 * i + 1] = static_cast<float>(x * s + y * c);
    }
}

void Rope::rotate_heads(std::span<float> row, std::int64_t position) const {
    const std::size_t d = head_dim();
    if (row.size() % d != 0) throw ShapeError("rope: row width is not a multiple of head_dim");
    for (std::size_t off = 0; off < row.size(); off += d) rotate(row.subspan(off, d), position);
}

std::vector<float> rope_rotate(std::span<const float> vec, std::int64_t position, double base) {
    std::vector<float> out(vec.begin(), vec.end());
    Rope(vec.size(), base).rotate(out, position);
    return out;
}

} // namespace kvcomm
