#include "kvcomm/model.hpp"

#include "kvcomm/error.hpp"
#include "kvcomm/kernels.hpp"

#include <algorithm>
#include <string>

namespace kvcomm {
namespace {

void relu(std::vector<float>& x) {
    for (float& v : x) v = std::max(v, 0.0f);
}

} // namespace

Model::Model(ModelWeights weights)
    : weights_(std::move(weights)), rope_(weights_.config.head_dim, static_cast<double>(weights_.config.rope_base)) {
    weights_.config.validate();
}

void Model::check_token(TokenId token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= config().vocab_size) {
        throw Error("token id " + std::to_string(token) + " outside vocabulary");
    }
}

std::span<const float> Model::embedding(TokenId token) const {
    check_token(token);
    return weights_.embedding.row(static_cast<std::size_t>(token));
}

Matrix Model::embed(std::span<const TokenId> tokens) const {
    Matrix m(tokens.size(), config().model_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto e = embedding(tokens[i]);
        std::copy(e.begin(), e.end(), m.row(i).begin());
    }
    return m;
}

PrefillResult Model::prefill(std::span<const TokenId> tokens, std::int64_t start_position, const KVCache* past) const {
    const auto& cfg = config();
    const std::size_t d = cfg.model_dim;
    const std::size_t n = tokens.size();
    if (start_position < 0) throw Error("prefill: negative start position");
    if (past != nullptr && past->length > 0 && past->end() != start_position) {
        throw ShapeError("prefill: past ends at " + std::to_string(past->end()) + " but start_position is " +
                         std::to_string(start_position));
    }
    if (static_cast<std::size_t>(start_position) + n > cfg.max_context) {
        throw ContextOverflow("prefill: positions up to " + std::to_string(start_position + static_cast<std::int64_t>(n)) +
                              " exceed max_context " + std::to_string(cfg.max_context));
    }
    const std::size_t past_len = (past != nullptr) ? past->length : 0;

    PrefillResult result;
    result.segment = KVFragment::empty(cfg.num_layers, d, start_position);
    result.segment.length = n;
    if (n == 0) return result;

    Matrix hidden = embed(tokens);
    std::vector<float> q(n * d), k(n * d), v(n * d), attn(n * d), o(n * d), x(n * d);
    std::vector<float> up(n * cfg.ffn_dim), down(n * d);
    std::vector<float> all_k, all_v;

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const auto& lw = weights_.layers[l];
        kernels::linear(hidden.data, n, d, lw.wq.data, d, q);
        kernels::linear(hidden.data, n, d, lw.wk.data, d, k);
        kernels::linear(hidden.data, n, d, lw.wv.data, d, v);
        for (std::size_t i = 0; i < n; ++i) {
            const auto pos = start_position + static_cast<std::int64_t>(i);
            rope_.rotate_heads(std::span<float>(q.data() + i * d, d), pos);
            rope_.rotate_heads(std::span<float>(k.data() + i * d, d), pos);
        }
        result.segment.keys[l] = k;
        result.segment.values[l] = v;

        std::span<const float> keys_view = k;
        std::span<const float> values_view = v;
        if (past_len > 0) {
            all_k = past->keys[l];
            all_k.insert(all_k.end(), k.begin(), k.end());
            all_v = past->values[l];
            all_v.insert(all_v.end(), v.begin(), v.end());
            keys_view = all_k;
            values_view = all_v;
        }
        const kernels::AttentionShape shape{n, past_len + n, cfg.num_heads, cfg.head_dim, past_len};
        kernels::attention(q, keys_view, values_view, shape, attn);
        kernels::linear(attn, n, d, lw.wo.data, d, o);

        for (std::size_t j = 0; j < n * d; ++j) x[j] = hidden.data[j] + o[j];
        kernels::linear(x, n, d, lw.ffn_up.data, cfg.ffn_dim, up);
        relu(up);
        kernels::linear(up, n, cfg.ffn_dim, lw.ffn_down.data, d, down);
        for (std::size_t j = 0; j < n * d; ++j) hidden.data[j] += down[j];
    }

    result.logits.resize(cfg.vocab_size);
    kernels::project(hidden.row(n - 1), weights_.unembedding.data, d, cfg.vocab_size, result.logits);
    return result;
}

std::vector<float> Model::logits_at(const KVCache& cache, TokenId last_token) const {
    const auto& cfg = config();
    const std::size_t d = cfg.model_dim;
    if (cache.length == 0) throw ShapeError("logits_at: empty cache");
    const std::int64_t pos = cache.end() - 1;

    std::vector<float> h(embedding(last_token).begin(), embedding(last_token).end());
    std::vector<float> q(d), attn(d), o(d), x(d), up(cfg.ffn_dim), down(d);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const auto& lw = weights_.layers[l];
        kernels::linear(h, 1, d, lw.wq.data, d, q);
        rope_.rotate_heads(q, pos);
        const kernels::AttentionShape shape{1, cache.length, cfg.num_heads, cfg.head_dim, cache.length - 1};
        kernels::attention(q, cache.keys[l], cache.values[l], shape, attn);
        kernels::linear(attn, 1, d, lw.wo.data, d, o);
        for (std::size_t j = 0; j < d; ++j) x[j] = h[j] + o[j];
        kernels::linear(x, 1, d, lw.ffn_up.data, cfg.ffn_dim, up);
        relu(up);
        kernels::linear(up, 1, cfg.ffn_dim, lw.ffn_down.data, d, down);
        for (std::size_t j = 0; j < d; ++j) h[j] += down[j];
    }
    std::vector<float> logits(cfg.vocab_size);
    kernels::project(h, weights_.unembedding.data, d, cfg.vocab_size, logits);
    return logits;
}

std::vector<TokenId> Model::greedy_decode(KVCache& cache, std::vector<float> logits, std::size_t max_new) const {
    std::vector<TokenId> out;
    if (max_new == 0) return out;
    if (cache.length == 0) throw ShapeError("greedy_decode: empty cache");
    for (;;) {
        const TokenId next = argmax(logits);
        if (next == kEosToken) break;
        out.push_back(next);
        if (out.size() == max_new) break;
        const TokenId step[] = {next};
        auto r = prefill(step, cache.end(), &cache);
        cache.append(r.segment);
        logits = std::move(r.logits);
    }
    return out;
}

std::vector<TokenId> Model::greedy_decode(KVCache& cache, TokenId last_token, std::size_t max_new) const {
    if (max_new == 0) return {};
    return greedy_decode(cache, logits_at(cache, last_token), max_new);
}

TokenId argmax(std::span<const float> logits) {
    if (logits.empty()) throw ShapeError("argmax of empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

} // namespace kvcomm
