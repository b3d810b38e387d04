#include "kvcomm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kvcomm::kernels {
namespace {

// Parallel regions below this many multiply-adds run on one thread.
constexpr std::size_t kMinParallelWork = 1 << 14;

// Four interleaved partial sums, combined in a fixed order.
inline double dot_double(const float* a, const float* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += static_cast<double>(a[i]) * b[i];
        s1 += static_cast<double>(a[i + 1]) * b[i + 1];
        s2 += static_cast<double>(a[i + 2]) * b[i + 2];
        s3 += static_cast<double>(a[i + 3]) * b[i + 3];
    }
    for (; i < n; ++i) s0 += static_cast<double>(a[i]) * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline float dot_row(const float* a, const float* b, std::size_t n) {
    return static_cast<float>(dot_double(a, b, n));
}

// y[j] for j in [begin, end): column sums of u weighted by h, accumulated
// row by row so u is read contiguously.
void project_range(const float* h, const float* u, std::size_t in, std::size_t out, std::size_t begin,
                   std::size_t end, float* y) {
    std::vector<double> acc(end - begin, 0.0);
    for (std::size_t i = 0; i < in; ++i) {
        const double hi = h[i];
        const float* row = u + i * out;
        for (std::size_t j = begin; j < end; ++j) acc[j - begin] += hi * row[j];
    }
    for (std::size_t j = begin; j < end; ++j) y[j] = static_cast<float>(acc[j - begin]);
}

// One (query, head) cell of causal attention. Shared by both variants so the
// arithmetic is identical.
void attention_cell(const float* q, const float* k, const float* v, const AttentionShape& s,
                    std::size_t qi, std::size_t h, float* out, std::vector<double>& scores,
                    std::vector<double>& acc) {
    const std::size_t width = s.num_heads * s.head_dim;
    const std::size_t visible = s.past + qi + 1;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
    const float* qrow = q + qi * width + h * s.head_dim;
    scores.resize(visible);
    double max_score = -INFINITY;
    for (std::size_t j = 0; j < visible; ++j) {
        scores[j] = dot_double(qrow, k + j * width + h * s.head_dim, s.head_dim) * inv_sqrt;
        if (scores[j] > max_score) max_score = scores[j];
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < visible; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        denom += scores[j];
    }
    acc.assign(s.head_dim, 0.0);
    for (std::size_t j = 0; j < visible; ++j) {
        const float* vrow = v + j * width + h * s.head_dim;
        const double w = scores[j];
        for (std::size_t t = 0; t < s.head_dim; ++t) acc[t] += w * vrow[t];
    }
    float* orow = out + qi * width + h * s.head_dim;
    for (std::size_t t = 0; t < s.head_dim; ++t) orow[t] = static_cast<float>(acc[t] / denom);
}

} // namespace

namespace serial {

void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<float> y) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) y[r * out + o] = dot_row(&x[r * in], &w[o * in], in);
    }
}

void project(std::span<const float> h, std::span<const float> u, std::size_t in, std::size_t out,
             std::span<float> y) {
    project_range(h.data(), u.data(), in, out, 0, out, y.data());
}

void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out) {
    std::vector<double> scores, acc;
    for (std::size_t qi = 0; qi < shape.num_queries; ++qi) {
        for (std::size_t h = 0; h < shape.num_heads; ++h) {
            attention_cell(q.data(), k.data(), v.data(), shape, qi, h, out.data(), scores, acc);
        }
    }
}

} // namespace serial

namespace omp {

void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<float> y) {
    const auto cells = static_cast<std::int64_t>(rows * out);
    const bool big = rows * out * in >= kMinParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (std::int64_t c = 0; c < cells; ++c) {
        const auto r = static_cast<std::size_t>(c) / out;
        const auto o = static_cast<std::size_t>(c) % out;
        y[r * out + o] = dot_row(&x[r * in], &w[o * in], in);
    }
}

void project(std::span<const float> h, std::span<const float> u, std::size_t in, std::size_t out,
             std::span<float> y) {
    const bool big = in * out >= kMinParallelWork;
#pragma omp parallel if (big)
    {
#ifdef _OPENMP
        const auto nt = static_cast<std::size_t>(omp_get_num_threads());
        const auto tid = static_cast<std::size_t>(omp_get_thread_num());
#else
        const std::size_t nt = 1, tid = 0;
#endif
        const std::size_t chunk = (out + nt - 1) / nt;
        const std::size_t begin = std::min(out, tid * chunk);
        const std::size_t end = std::min(out, begin + chunk);
        if (begin < end) project_range(h.data(), u.data(), in, out, begin, end, y.data());
    }
}

void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out) {
    const auto cells = static_cast<std::int64_t>(shape.num_queries * shape.num_heads);
    const bool big = shape.num_queries * shape.num_keys * shape.num_heads * shape.head_dim >= kMinParallelWork;
#pragma omp parallel if (big)
    {
        std::vector<double> scores, acc;
#pragma omp for schedule(static)
        for (std::int64_t c = 0; c < cells; ++c) {
            const auto qi = static_cast<std::size_t>(c) / shape.num_heads;
            const auto h = static_cast<std::size_t>(c) % shape.num_heads;
            attention_cell(q.data(), k.data(), v.data(), shape, qi, h, out.data(), scores, acc);
        }
    }
}

} // namespace omp

#ifdef _OPENMP
void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<float> y) {
    omp::linear(x, rows, in, w, out, y);
}
void project(std::span<const float> h, std::span<const float> u, std::size_t in, std::size_t out,
             std::span<float> y) {
    omp::project(h, u, in, out, y);
}
void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out) {
    omp::attention(q, k, v, shape, out);
}
void set_num_threads(int n) {
    if (n > 0) omp_set_num_threads(n);
}
int max_threads() { return omp_get_max_threads(); }
bool parallel_enabled() { return true; }
#else
void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<float> y) {
    serial::linear(x, rows, in, w, out, y);
}
void project(std::span<const float> h, std::span<const float> u, std::size_t in, std::size_t out,
             std::span<float> y) {
    serial::project(h, u, in, out, y);
}
void attention(std::span<const float> q, std::span<const float> k, std::span<const float> v,
               const AttentionShape& shape, std::span<float> out) {
    serial::attention(q, k, v, shape, out);
}
void set_num_threads(int) {}
int max_threads() { return 1; }
bool parallel_enabled() { return false; }
#endif

} // namespace kvcomm::kernels
