#include "kvcomm/geometry.hpp"

#include "kvcomm/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace kvcomm {
namespace {

void check_same_shape(std::size_t layers_a, std::size_t layers_b, std::size_t len_a, std::size_t len_b,
                      std::size_t width_a, std::size_t width_b, const char* what) {
    if (layers_a != layers_b || len_a != len_b || width_a != width_b) {
        throw ShapeError(std::string(what) + ": shape mismatch (layers " + std::to_string(layers_a) + "/" +
                         std::to_string(layers_b) + ", length " + std::to_string(len_a) + "/" +
                         std::to_string(len_b) + ", width " + std::to_string(width_a) + "/" +
                         std::to_string(width_b) + ")");
    }
}

void rotate_rows(std::vector<float>& rows, std::size_t length, std::size_t width, std::int64_t delta,
                 const Rope& rope) {
    if (delta == 0) return;
    for (std::size_t i = 0; i < length; ++i) {
        rope.rotate_heads(std::span<float>(rows.data() + i * width, width), delta);
    }
}

} // namespace

KVFragment KVFragment::empty(std::size_t num_layers, std::size_t width, std::int64_t start) {
    KVFragment f;
    f.start = start;
    f.width = width;
    f.keys.assign(num_layers, {});
    f.values.assign(num_layers, {});
    return f;
}

void KVFragment::append(const KVFragment& other) {
    if (other.length == 0) return;
    if (length == 0 && keys.empty()) {
        *this = other;
        return;
    }
    if (other.start != end()) {
        throw ShapeError("append: fragment starts at " + std::to_string(other.start) + ", expected " +
                         std::to_string(end()));
    }
    if (other.num_layers() != num_layers() || other.width != width) throw ShapeError("append: layer/width mismatch");
    for (std::size_t l = 0; l < num_layers(); ++l) {
        keys[l].insert(keys[l].end(), other.keys[l].begin(), other.keys[l].end());
        values[l].insert(values[l].end(), other.values[l].begin(), other.values[l].end());
    }
    length += other.length;
}

KVOffset KVOffset::zeros(std::size_t num_layers, std::size_t width, std::size_t length, std::int64_t base_start) {
    KVOffset o;
    o.base_start = base_start;
    o.length = length;
    o.width = width;
    o.dk.assign(num_layers, std::vector<float>(length * width, 0.0f));
    o.dv.assign(num_layers, std::vector<float>(length * width, 0.0f));
    return o;
}

KVOffset KVOffset::truncated(std::size_t n) const {
    if (n > length) throw ShapeError("offset truncation beyond its length");
    KVOffset o;
    o.base_start = base_start;
    o.length = n;
    o.width = width;
    o.dk.reserve(dk.size());
    o.dv.reserve(dv.size());
    for (std::size_t l = 0; l < dk.size(); ++l) {
        o.dk.emplace_back(dk[l].begin(), dk[l].begin() + static_cast<std::ptrdiff_t>(n * width));
        o.dv.emplace_back(dv[l].begin(), dv[l].begin() + static_cast<std::ptrdiff_t>(n * width));
    }
    return o;
}

KVFragment slice_cache(const KVFragment& cache, const SegmentSpan& span) {
    if (span.start + span.length > cache.length) {
        throw ShapeError("slice [" + std::to_string(span.start) + ", " + std::to_string(span.start + span.length) +
                         ") outside fragment of length " + std::to_string(cache.length));
    }
    KVFragment out = KVFragment::empty(cache.num_layers(), cache.width,
                                       cache.start + static_cast<std::int64_t>(span.start));
    out.length = span.length;
    const auto first = static_cast<std::ptrdiff_t>(span.start * cache.width);
    const auto last = static_cast<std::ptrdiff_t>((span.start + span.length) * cache.width);
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        out.keys[l].assign(cache.keys[l].begin() + first, cache.keys[l].begin() + last);
        out.values[l].assign(cache.values[l].begin() + first, cache.values[l].begin() + last);
    }
    return out;
}

KVFragment shift_positions(const KVFragment& frag, std::int64_t new_start, const Rope& rope) {
    KVFragment out = frag;
    out.start = new_start;
    for (auto& k : out.keys) rotate_rows(k, out.length, out.width, new_start - frag.start, rope);
    return out;
}

KVOffset measure_offset(const KVFragment& real, const KVFragment& base, const Rope& rope) {
    check_same_shape(real.num_layers(), base.num_layers(), real.length, base.length, real.width, base.width,
                     "measure_offset");
    KVOffset o;
    o.base_start = base.start;
    o.length = base.length;
    o.width = base.width;
    o.dk.resize(base.num_layers());
    o.dv.resize(base.num_layers());
    for (std::size_t l = 0; l < base.num_layers(); ++l) {
        std::vector<float> aligned = real.keys[l];
        rotate_rows(aligned, real.length, real.width, base.start - real.start, rope);
        auto& dk = o.dk[l];
        auto& dv = o.dv[l];
        dk.resize(aligned.size());
        dv.resize(aligned.size());
        for (std::size_t j = 0; j < aligned.size(); ++j) {
            dk[j] = aligned[j] - base.keys[l][j];
            dv[j] = real.values[l][j] - base.values[l][j];
        }
    }
    return o;
}

KVFragment apply_offset(const KVFragment& base, const KVOffset& delta, std::int64_t target_start, const Rope& rope) {
    check_same_shape(base.num_layers(), delta.num_layers(), base.length, delta.length, base.width, delta.width,
                     "apply_offset");
    KVFragment out = base;
    out.start = target_start;
    for (std::size_t l = 0; l < base.num_layers(); ++l) {
        auto& k = out.keys[l];
        auto& v = out.values[l];
        for (std::size_t j = 0; j < k.size(); ++j) {
            k[j] += delta.dk[l][j];
            v[j] += delta.dv[l][j];
        }
        rotate_rows(k, out.length, out.width, target_start - base.start, rope);
    }
    return out;
}

KVFragment concat_fragments(std::span<const KVFragment> parts) {
    if (parts.empty()) throw ShapeError("concat_fragments: no parts");
    KVFragment out = KVFragment::empty(parts.front().num_layers(), parts.front().width, parts.front().start);
    std::int64_t expected = parts.front().start;
    for (const auto& p : parts) {
        if (p.start != expected) {
            throw ShapeError("concat_fragments: part starts at " + std::to_string(p.start) + ", expected " +
                             std::to_string(expected) + (p.start > expected ? " (gap)" : " (overlap)"));
        }
        if (p.num_layers() != out.num_layers() || p.width != out.width) {
            throw ShapeError("concat_fragments: layer/width mismatch");
        }
        for (std::size_t l = 0; l < out.num_layers(); ++l) {
            out.keys[l].insert(out.keys[l].end(), p.keys[l].begin(), p.keys[l].end());
            out.values[l].insert(out.values[l].end(), p.values[l].begin(), p.values[l].end());
        }
        out.length += p.length;
        expected = p.end();
    }
    return out;
}

float max_abs_diff(const KVFragment& a, const KVFragment& b) {
    check_same_shape(a.num_layers(), b.num_layers(), a.length, b.length, a.width, b.width, "max_abs_diff");
    float worst = 0.0f;
    for (std::size_t l = 0; l < a.num_layers(); ++l) {
        for (std::size_t j = 0; j < a.keys[l].size(); ++j) {
            worst = std::max(worst, std::fabs(a.keys[l][j] - b.keys[l][j]));
            worst = std::max(worst, std::fabs(a.values[l][j] - b.values[l][j]));
        }
    }
    return worst;
}

} // namespace kvcomm
