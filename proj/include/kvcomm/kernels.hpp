#pragma once

#include <cstddef>
#include <span>

// Numeric kernels behind the forward pass. Each kernel exists twice: a plain
// serial loop nest kept as the reference, and an OpenMP version that splits
// the same loop nest over output elements. Every output element is produced
// by exactly one thread with the same accumulation order as the serial
// version, so the two agree bit for bit at any thread count.
//
// Dot products accumulate in double; inputs and outputs are float.

namespace kvcomm::kernels {

struct AttentionShape {
    std::size_t num_queries;  // new tokens
    std::size_t num_keys;     // past + new tokens
    std::size_t num_heads;
    std::size_t head_dim;
    std::size_t past;         // query i sees keys [0, past + i]
};

namespace serial {

/// y[r, o] = sum_i x[r, i] * w[o, i]   (x: rows x in, w: out x in)
void linear(std::span<const float> x, std::size_t rows, std::size_t in,
            std::span<const float> w, std::size_t out, std::span<float> y);

/// y[j] = sum_i h[i] * u[i, j]   (u: in x out)
void project(std::span<const float> h, std::span<const float> u, std::size_t in,
             std::size_t out, std::span<float> y);

/// Causal multi-head attention; q/out: num_queries x (heads*head_dim),
/// k/v: num_keys x (heads*head_dim).
void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out);

} // namespace serial

namespace omp {

void linear(std::span<const float> x, std::size_t rows, std::size_t in,
            std::span<const float> w, std::size_t out, std::span<float> y);

void project(std::span<const float> h, std::span<const float> u, std::size_t in,
             std::size_t out, std::span<float> y);

void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out);

} // namespace omp

// Dispatch: OpenMP when the library was built with it, serial otherwise.
void linear(std::span<const float> x, std::size_t rows, std::size_t in,
            std::span<const float> w, std::size_t out, std::span<float> y);
void project(std::span<const float> h, std::span<const float> u, std::size_t in,
             std::size_t out, std::span<float> y);
void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out);

/// Threads used by parallel regions; n <= 0 leaves the runtime default.
void set_num_threads(int n);
int max_threads();
bool parallel_enabled();

} // namespace kvcomm::kernels
