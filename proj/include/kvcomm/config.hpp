#pragma once

#include <cstddef>
#include <cstdint>

namespace kvcomm {

inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr std::size_t kMinVocab = 258;
inline constexpr std::uint64_t kDefaultSeed = 7;

/// Dimensions and seed of the toy decoder. Field order is the on-disk order
/// of the weight file header.
struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t model_dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = kMinVocab;
    float rope_base = 10000.0f;
    float weight_scale = 0.5f;
    std::uint64_t seed = kDefaultSeed;
    std::size_t max_context = 4096;

    /// Throws ParseError describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

} // namespace kvcomm
