#pragma once

#include "kvcomm/rope.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvcomm {

/// Equality tolerance for every geometry contract (max-abs, float32).
inline constexpr float kGeometryEps = 1e-6f;

/// Keys and values of a contiguous run of positions at every layer.
/// Keys are stored rotated at their absolute position `start + i`; values are
/// never rotated. Rows are `width` = heads * head_dim floats.
struct KVFragment {
    std::int64_t start = 0;
    std::size_t length = 0;
    std::size_t width = 0;
    std::vector<std::vector<float>> keys;    // [layer][pos * width + j]
    std::vector<std::vector<float>> values;  // [layer][pos * width + j]

    static KVFragment empty(std::size_t num_layers, std::size_t width, std::int64_t start);

    std::size_t num_layers() const { return keys.size(); }
    std::int64_t end() const { return start + static_cast<std::int64_t>(length); }

    std::span<const float> key(std::size_t layer, std::size_t pos) const {
        return {keys[layer].data() + pos * width, width};
    }
    std::span<const float> value(std::size_t layer, std::size_t pos) const {
        return {values[layer].data() + pos * width, width};
    }

    /// Appends all positions of `other`, which must start at end().
    void append(const KVFragment& other);

    std::size_t bytes() const { return 2 * num_layers() * length * width * sizeof(float); }

    bool operator==(const KVFragment&) const = default;
};

using KVCache = KVFragment;

/// Difference between an in-context fragment and its base. Keys are held in
/// the base frame, i.e. de-rotated to the base fragment's positions starting
/// at base_start.
struct KVOffset {
    std::int64_t base_start = 0;
    std::size_t length = 0;
    std::size_t width = 0;
    std::vector<std::vector<float>> dk;  // [layer][pos * width + j]
    std::vector<std::vector<float>> dv;

    static KVOffset zeros(std::size_t num_layers, std::size_t width, std::size_t length,
                          std::int64_t base_start);

    std::size_t num_layers() const { return dk.size(); }
    std::size_t bytes() const { return 2 * num_layers() * length * width * sizeof(float); }

    /// Copy of the first n positions.
    KVOffset truncated(std::size_t n) const;

    bool operator==(const KVOffset&) const = default;
};

enum class SegmentKind { Prefix, Placeholder };

/// A span of an instantiated prompt. `start` is relative to the fragment it
/// indexes; `slot` is the template index i of p_i / phi_i.
struct SegmentSpan {
    std::size_t start = 0;
    std::size_t length = 0;
    SegmentKind kind = SegmentKind::Prefix;
    std::size_t slot = 0;

    bool operator==(const SegmentSpan&) const = default;
};

KVFragment slice_cache(const KVFragment& cache, const SegmentSpan& span);

/// Re-rotates every key from its current position to new_start + i.
KVFragment shift_positions(const KVFragment& frag, std::int64_t new_start, const Rope& rope);

/// dk = R_{base.start - real.start} k_real - k_base,  dv = v_real - v_base.
KVOffset measure_offset(const KVFragment& real, const KVFragment& base, const Rope& rope);

/// keys: R_{target - base.start}(k_base + dk); values: v_base + dv.
KVFragment apply_offset(const KVFragment& base, const KVOffset& delta, std::int64_t target_start,
                        const Rope& rope);

/// Joins position-contiguous parts; throws ShapeError on gaps or overlaps.
KVFragment concat_fragments(std::span<const KVFragment> parts);

/// Largest |a - b| over keys and values; throws on shape mismatch.
float max_abs_diff(const KVFragment& a, const KVFragment& b);

} // namespace kvcomm
