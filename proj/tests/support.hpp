#pragma once
// Shared fixtures for the unit and acceptance tests: small models, seeded
// generators, and oracles that do not go through the library code under test.

#include "kvcomm/geometry.hpp"
#include "kvcomm/model.hpp"
#include "kvcomm/random.hpp"
#include "kvcomm/weights.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace kvtest {

inline kvcomm::ModelConfig small_config(std::uint64_t seed = kvcomm::kDefaultSeed) {
    kvcomm::ModelConfig c;
    c.num_layers = 2;
    c.num_heads = 2;
    c.head_dim = 8;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.seed = seed;
    return c;
}

inline const kvcomm::Model& default_model() {
    static const kvcomm::Model m(kvcomm::init_weights(kvcomm::ModelConfig{}));
    return m;
}

inline const kvcomm::Model& small_model() {
    static const kvcomm::Model m(kvcomm::init_weights(small_config()));
    return m;
}

// Hand-rolled seeded generators for property tests.
struct Gen {
    kvcomm::SplitMix64 rng;
    explicit Gen(std::uint64_t seed) : rng(seed) {}

    double real(double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    }
    std::vector<float> vec(std::size_t n, double scale = 1.0) {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(scale * rng.normal());
        return v;
    }
    std::vector<kvcomm::TokenId> tokens(std::size_t n) {
        std::vector<kvcomm::TokenId> t(n);
        for (auto& x : t) x = static_cast<kvcomm::TokenId>(rng.below(256));
        return t;
    }
    kvcomm::KVFragment fragment(std::size_t layers, std::size_t width, std::size_t length, std::int64_t start) {
        auto f = kvcomm::KVFragment::empty(layers, width, start);
        f.length = length;
        for (std::size_t l = 0; l < layers; ++l) {
            f.keys[l] = vec(length * width);
            f.values[l] = vec(length * width);
        }
        return f;
    }
};

// Independent RoPE: each pair is treated as a complex number multiplied by
// exp(i * pos * theta_i), computed in long double.
inline std::vector<float> oracle_rotate(const std::vector<float>& v, std::int64_t pos, double base = 10000.0) {
    const std::size_t d = v.size();
    std::vector<float> out(d);
    for (std::size_t i = 0; i < d / 2; ++i) {
        const long double theta = std::pow(static_cast<long double>(base), -2.0L * i / d);
        const long double ang = static_cast<long double>(pos) * theta;
        const long double c = std::cos(ang), s = std::sin(ang);
        const long double x = v[2 * i], y = v[2 * i + 1];
        out[2 * i] = static_cast<float>(x * c - y * s);
        out[2 * i + 1] = static_cast<float>(x * s + y * c);
    }
    return out;
}

inline double max_abs(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

inline double norm2(const std::vector<float>& a) {
    double s = 0.0;
    for (float x : a) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

inline double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Dense prefill of `context` followed by `tokens`; returns the fragment of
// `tokens` only.
inline kvcomm::KVFragment in_context(const kvcomm::Model& m, const std::vector<kvcomm::TokenId>& context,
                                     const std::vector<kvcomm::TokenId>& tokens) {
    auto past = m.prefill(context, 0);
    return m.prefill(tokens, static_cast<std::int64_t>(context.size()), &past.segment).segment;
}

} // namespace kvtest
