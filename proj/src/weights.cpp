#include "kvcomm/weights.hpp"

#include "kvcomm/error.hpp"
#include "kvcomm/random.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace kvcomm {
namespace {

Matrix seeded_matrix(std::size_t rows, std::size_t cols, const ModelConfig& cfg, const std::string& name) {
    Matrix m(rows, cols);
    const float scale = cfg.weight_scale / std::sqrt(static_cast<float>(cfg.model_dim));
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        m.data[i] = keyed_normal(cfg.seed, name, i) * scale;
    }
    return m;
}

template <typename W, typename Fn>
void for_each_matrix(W& w, Fn&& fn) {
    fn(w.embedding);
    for (auto& layer : w.layers) {
        fn(layer.wq);
        fn(layer.wk);
        fn(layer.wv);
        fn(layer.wo);
        fn(layer.ffn_up);
        fn(layer.ffn_down);
    }
    fn(w.unembedding);
}

void shape_matrices(ModelWeights& w) {
    const auto& c = w.config;
    const std::size_t d = c.model_dim;
    w.embedding = Matrix(c.vocab_size, d);
    w.layers.assign(c.num_layers, LayerWeights{});
    for (auto& layer : w.layers) {
        layer.wq = Matrix(d, d);
        layer.wk = Matrix(d, d);
        layer.wv = Matrix(d, d);
        layer.wo = Matrix(d, d);
        layer.ffn_up = Matrix(c.ffn_dim, d);
        layer.ffn_down = Matrix(d, c.ffn_dim);
    }
    w.unembedding = Matrix(d, c.vocab_size);
}

// Explicit little-endian byte order regardless of host.
void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("weight file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    const std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

} // namespace

ModelWeights init_weights(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    const std::size_t d = config.model_dim;
    w.embedding = seeded_matrix(config.vocab_size, d, config, "embedding");
    w.layers.reserve(config.num_layers);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerWeights layer;
        layer.wq = seeded_matrix(d, d, config, p + "wq");
        layer.wk = seeded_matrix(d, d, config, p + "wk");
        layer.wv = seeded_matrix(d, d, config, p + "wv");
        layer.wo = seeded_matrix(d, d, config, p + "wo");
        layer.ffn_up = seeded_matrix(config.ffn_dim, d, config, p + "ffn_up");
        layer.ffn_down = seeded_matrix(d, config.ffn_dim, config, p + "ffn_down");
        w.layers.push_back(std::move(layer));
    }
    w.unembedding = seeded_matrix(d, config.vocab_size, config, "unembedding");
    return w;
}

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open weight file for writing: " + path.string());
    const auto& c = weights.config;
    os.write("KVC1", 4);
    put_u32(os, static_cast<std::uint32_t>(c.num_layers));
    put_u32(os, static_cast<std::uint32_t>(c.num_heads));
    put_u32(os, static_cast<std::uint32_t>(c.head_dim));
    put_u32(os, static_cast<std::uint32_t>(c.model_dim));
    put_u32(os, static_cast<std::uint32_t>(c.ffn_dim));
    put_u32(os, static_cast<std::uint32_t>(c.vocab_size));
    put_f32(os, c.rope_base);
    put_f32(os, c.weight_scale);
    put_u64(os, c.seed);
    put_u32(os, static_cast<std::uint32_t>(c.max_context));
    for_each_matrix(weights, [&](const Matrix& m) {
        for (float f : m.data) put_f32(os, f);
    });
    if (!os) throw Error("failed writing weight file: " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open weight file: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "KVC1", 4) != 0) {
        throw ParseError("not a KVC1 weight file: " + path.string());
    }
    ModelWeights w;
    auto& c = w.config;
    c.num_layers = get_u32(is);
    c.num_heads = get_u32(is);
    c.head_dim = get_u32(is);
    c.model_dim = get_u32(is);
    c.ffn_dim = get_u32(is);
    c.vocab_size = get_u32(is);
    c.rope_base = get_f32(is);
    c.weight_scale = get_f32(is);
    c.seed = get_u64(is);
    c.max_context = get_u32(is);
    c.validate();
    shape_matrices(w);
    for_each_matrix(w, [&](Matrix& m) {
        for (float& f : m.data) f = get_f32(is);
    });
    if (is.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes in weight file");
    return w;
}

} // namespace kvcomm
