// Serial reference kernels against their OpenMP counterparts, plus a full
// prefill. Run with --benchmark_filter to pick a family.

#include "kvcomm/kernels.hpp"
#include "kvcomm/model.hpp"
#include "kvcomm/random.hpp"
#include "kvcomm/tokenizer.hpp"

#include <benchmark/benchmark.h>

#include <vector>

using namespace kvcomm;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

template <auto Kernel>
void linear(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t in = 256, out = 256;
    const auto x = noise(rows * in, 1), w = noise(out * in, 2);
    std::vector<float> y(rows * out);
    for (auto _ : state) {
        Kernel(x, rows, in, w, out, y);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * in * out));
}

template <auto Kernel>
void project(benchmark::State& state) {
    const std::size_t in = 64, out = static_cast<std::size_t>(state.range(0));
    const auto h = noise(in, 3), u = noise(in * out, 4);
    std::vector<float> y(out);
    for (auto _ : state) {
        Kernel(h, u, in, out, y);
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Kernel>
void attention(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const kernels::AttentionShape shape{n, n, 4, 16, 0};
    const auto q = noise(n * 64, 5), k = noise(n * 64, 6), v = noise(n * 64, 7);
    std::vector<float> out(n * 64);
    for (auto _ : state) {
        Kernel(q, k, v, shape, out);
        benchmark::DoNotOptimize(out.data());
    }
}

void prefill(benchmark::State& state) {
    kernels::set_num_threads(static_cast<int>(state.range(1)));
    static const Model model(init_weights(ModelConfig{}));
    std::vector<TokenId> tokens(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<TokenId>((i * 37) % 256);
    for (auto _ : state) benchmark::DoNotOptimize(model.prefill(tokens, 0).logits.data());
    kernels::set_num_threads(0);
}

} // namespace

BENCHMARK(linear<kernels::serial::linear>)->Name("linear/serial")->Arg(16)->Arg(128)->Arg(512);
BENCHMARK(linear<kernels::omp::linear>)->Name("linear/omp")->Arg(16)->Arg(128)->Arg(512);
BENCHMARK(project<kernels::serial::project>)->Name("project/serial")->Arg(258)->Arg(4096);
BENCHMARK(project<kernels::omp::project>)->Name("project/omp")->Arg(258)->Arg(4096);
BENCHMARK(attention<kernels::serial::attention>)->Name("attention/serial")->Arg(64)->Arg(256);
BENCHMARK(attention<kernels::omp::attention>)->Name("attention/omp")->Arg(64)->Arg(256);
BENCHMARK(prefill)->Name("prefill")->Args({128, 1})->Args({128, 8})->Args({512, 1})->Args({512, 8});

BENCHMARK_MAIN();
