// Serial reference vs. production kernels on the model's hot shapes.
#include "cellmtl/kernels.hpp"
#include "cellmtl/rng.hpp"

#include <benchmark/benchmark.h>

#include <vector>

namespace k = cellmtl::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed)
{
    cellmtl::Rng rng(seed);
    std::vector<float> v(n);
    for (float& x : v)
        x = float(rng.normal());
    return v;
}

// inception 3x3 branch at batch 32: 64 -> 24 channels on 14x14
k::Conv2dGeom inception_geom()
{
    k::Conv2dGeom g;
    g.batch = 32;
    g.in_ch = 64;
    g.height = g.width = 14;
    g.out_ch = 24;
    g.kh = g.kw = 3;
    g.pad = 1;
    return g;
}

template <bool Parallel>
void conv_forward(benchmark::State& st)
{
    const auto g = inception_geom();
    const auto x = random_vec(g.batch * g.in_ch * g.height * g.width, 1);
    const auto w = random_vec(g.out_ch * g.patch(), 2);
    const auto b = random_vec(g.out_ch, 3);
    std::vector<float> y(g.batch * g.out_ch * g.out_h() * g.out_w());
    for (auto _ : st) {
        if constexpr (Parallel)
            k::parallel::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
        else
            k::serial::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
        benchmark::DoNotOptimize(y.data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(g.batch));
}

template <bool Parallel>
void conv_backward(benchmark::State& st)
{
    const auto g = inception_geom();
    const auto x = random_vec(g.batch * g.in_ch * g.height * g.width, 1);
    const auto w = random_vec(g.out_ch * g.patch(), 2);
    const auto dy = random_vec(g.batch * g.out_ch * g.out_h() * g.out_w(), 4);
    std::vector<float> dx(x.size()), dw(w.size()), db(g.out_ch);
    for (auto _ : st) {
        if constexpr (Parallel)
            k::parallel::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
        else
            k::serial::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
        benchmark::DoNotOptimize(dx.data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(g.batch));
}

// token projection: [32*50, 128] x [128, 384]
template <bool Parallel>
void gemm(benchmark::State& st)
{
    const std::size_t m = 32 * 50, n = 384, kk = 128;
    const auto a = random_vec(m * kk, 5);
    const auto b = random_vec(kk * n, 6);
    std::vector<float> c(m * n);
    for (auto _ : st) {
        if constexpr (Parallel)
            k::parallel::gemm(false, false, m, n, kk, 1.0f, a.data(), b.data(), 0.0f, c.data());
        else
            k::serial::gemm(false, false, m, n, kk, 1.0f, a.data(), b.data(), 0.0f, c.data());
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(2 * m * n * kk));
}

// ViT self-attention: batch 32 x 4 heads, 50 tokens, head dim 32
template <bool Parallel>
void attention(benchmark::State& st)
{
    const std::size_t heads = 32 * 4, tokens = 50, d = 32;
    const auto q = random_vec(heads * tokens * d, 7);
    const auto kv = random_vec(heads * tokens * d, 8);
    const auto v = random_vec(heads * tokens * d, 9);
    std::vector<float> probs(heads * tokens * tokens), out(heads * tokens * d);
    for (auto _ : st) {
        if constexpr (Parallel)
            k::parallel::attention_forward(heads, tokens, d, q.data(), kv.data(), v.data(), probs.data(), out.data());
        else
            k::serial::attention_forward(heads, tokens, d, q.data(), kv.data(), v.data(), probs.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * std::int64_t(heads));
}

} // namespace

BENCHMARK(conv_forward<false>)->Name("conv2d_forward/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_forward<true>)->Name("conv2d_forward/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward<false>)->Name("conv2d_backward/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward<true>)->Name("conv2d_backward/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(gemm<false>)->Name("gemm/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(gemm<true>)->Name("gemm/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(attention<false>)->Name("attention_forward/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(attention<true>)->Name("attention_forward/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
