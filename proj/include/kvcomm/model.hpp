#pragma once

#include "kvcomm/geometry.hpp"
#include "kvcomm/rope.hpp"
#include "kvcomm/tokenizer.hpp"
#include "kvcomm/weights.hpp"

#include <span>
#include <vector>

namespace kvcomm {

struct PrefillResult {
    KVFragment segment;          // KV of the new tokens only
    std::vector<float> logits;   // at the last new token
};

/// Decoder-only RoPE transformer without normalization layers. Each block
/// computes h' = h + FFN(h + Attn(h)) with FFN(x) = W_down relu(W_up x).
///
/// Forward passes are const and may run concurrently; a KVCache being
/// extended by greedy_decode must not be shared between threads.
class Model {
public:
    explicit Model(ModelWeights weights);

    const ModelConfig& config() const { return weights_.config; }
    const ModelWeights& weights() const { return weights_; }
    const Rope& rope() const { return rope_; }

    /// Runs `tokens` at positions start_position.. with causal attention over
    /// `past` (which must end at start_position) and the new tokens.
    PrefillResult prefill(std::span<const TokenId> tokens, std::int64_t start_position,
                          const KVCache* past = nullptr) const;

    /// Logits for the token whose KV already occupies the last position of
    /// `cache`, recomputed with a query-only pass against the stored keys and
    /// values. Used when the cache was assembled rather than prefilled.
    std::vector<float> logits_at(const KVCache& cache, TokenId last_token) const;

    /// Greedy argmax decoding starting from `logits`. Stops at EOS (not
    /// emitted) or after max_new tokens; every emitted token except the last
    /// is appended to `cache`.
    std::vector<TokenId> greedy_decode(KVCache& cache, std::vector<float> logits,
                                       std::size_t max_new) const;

    /// As above, taking the first-step logits from logits_at(cache, last_token).
    std::vector<TokenId> greedy_decode(KVCache& cache, TokenId last_token, std::size_t max_new) const;

    std::span<const float> embedding(TokenId token) const;

    /// Layer-1 input embeddings of a token run, one row per token.
    Matrix embed(std::span<const TokenId> tokens) const;

private:
    void check_token(TokenId token) const;

    ModelWeights weights_;
    Rope rope_;
};

/// Index of the largest entry; ties go to the smallest index.
TokenId argmax(std::span<const float> logits);

} // namespace kvcomm
