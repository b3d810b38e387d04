#pragma once

#include "kvcomm/config.hpp"
#include "kvcomm/matrix.hpp"

#include <filesystem>
#include <vector>

namespace kvcomm {

struct LayerWeights {
    Matrix wq;        // D x D
    Matrix wk;        // D x D
    Matrix wv;        // D x D
    Matrix wo;        // D x D
    Matrix ffn_up;    // F x D
    Matrix ffn_down;  // D x F

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;    // vocab x D
    std::vector<LayerWeights> layers;
    Matrix unembedding;  // D x vocab

    bool operator==(const ModelWeights&) const = default;
};

/// Every entry is keyed_normal(seed, "<param name>", flat index) scaled by
/// weight_scale / sqrt(D). Parameter names: "embedding", "layer<i>.wq",
/// "layer<i>.wk", "layer<i>.wv", "layer<i>.wo", "layer<i>.ffn_up",
/// "layer<i>.ffn_down", "unembedding".
ModelWeights init_weights(const ModelConfig& config);

/// Weight file layout (all little-endian):
///   "KVC1"
///   u32 num_layers, u32 num_heads, u32 head_dim, u32 model_dim, u32 ffn_dim,
///   u32 vocab_size, f32 rope_base, f32 weight_scale, u64 seed, u32 max_context
///   f32 parameters: embedding, then per layer wq wk wv wo ffn_up ffn_down,
///   then unembedding; each matrix row-major.
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

} // namespace kvcomm
