// Serial reference kernels against the OpenMP kernels on registration-sized
// shapes. Thread count follows STEERREG_THREADS.

#include "steerreg/kernels.hpp"
#include "steerreg/rng.hpp"

#include <benchmark/benchmark.h>

#include <vector>

using namespace steerreg;
using namespace steerreg::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

struct ConvCase {
    ConvGeometry g;
    std::vector<double> in, kernel, grad_out;
};

// Args: channels in, channels out, extent, stride.
ConvCase conv_case(const benchmark::State& st) {
    const auto ci = static_cast<std::size_t>(st.range(0)), co = static_cast<std::size_t>(st.range(1));
    const auto s = static_cast<std::size_t>(st.range(2));
    ConvCase c;
    c.g = ConvGeometry::make({1, ci, s, s, s}, {co, ci, 3, 3, 3}, static_cast<int>(st.range(3)), 1);
    c.in = random_vector(c.g.input_size(), 1);
    c.kernel = random_vector(c.g.kernel_size(), 2);
    c.grad_out = random_vector(c.g.output_size(), 3);
    return c;
}

template <bool Parallel>
void conv_forward(benchmark::State& st) {
    ConvCase c = conv_case(st);
    std::vector<double> out(c.g.output_size());
    for (auto _ : st) {
        if constexpr (Parallel)
            conv3d_forward(c.g, c.in, c.kernel, out);
        else
            reference::conv3d_forward(c.g, c.in, c.kernel, out);
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void conv_backward(benchmark::State& st) {
    ConvCase c = conv_case(st);
    std::vector<double> gi(c.g.input_size()), gk(c.g.kernel_size());
    for (auto _ : st) {
        if constexpr (Parallel) {
            conv3d_backward_input(c.g, c.grad_out, c.kernel, gi);
            conv3d_backward_kernel(c.g, c.in, c.grad_out, gk);
        } else {
            reference::conv3d_backward_input(c.g, c.grad_out, c.kernel, gi);
            reference::conv3d_backward_kernel(c.g, c.in, c.grad_out, gk);
        }
        benchmark::DoNotOptimize(gi.data());
        benchmark::DoNotOptimize(gk.data());
    }
}

template <bool Parallel>
void grid_sample(benchmark::State& st) {
    const auto s = static_cast<std::size_t>(st.range(0));
    const VolumeShape shape{1, 1, s, s, s};
    const auto img = random_vector(shape.size(), 4);
    auto disp = random_vector(3 * shape.voxels(), 5);
    for (double& d : disp) d *= 3.0;
    const auto go = random_vector(shape.size(), 6);
    std::vector<double> out(shape.size()), gi(shape.size()), gd(3 * shape.voxels());
    for (auto _ : st) {
        if constexpr (Parallel) {
            grid_sample_forward(shape, img, disp, out);
            grid_sample_backward(shape, img, disp, go, gi, gd);
        } else {
            reference::grid_sample_forward(shape, img, disp, out);
            reference::grid_sample_backward(shape, img, disp, go, gi, gd);
        }
        benchmark::DoNotOptimize(gd.data());
    }
}

template <bool Parallel>
void upsample(benchmark::State& st) {
    const auto s = static_cast<std::size_t>(st.range(0));
    const VolumeShape shape{1, 16, s, s, s};
    const auto in = random_vector(shape.size(), 7);
    const auto go = random_vector(shape.size() * 8, 8);
    std::vector<double> out(shape.size() * 8), gi(shape.size());
    for (auto _ : st) {
        if constexpr (Parallel) {
            upsample2_forward(shape, in, out);
            upsample2_backward(shape, go, gi);
        } else {
            reference::upsample2_forward(shape, in, out);
            reference::upsample2_backward(shape, go, gi);
        }
        benchmark::DoNotOptimize(gi.data());
    }
}

template <bool Parallel>
void window_sum(benchmark::State& st) {
    const auto s = static_cast<std::size_t>(st.range(0));
    const VolumeShape shape{1, 5, s, s, s};
    const auto in = random_vector(shape.size(), 9);
    std::vector<double> out(shape.size());
    for (auto _ : st) {
        if constexpr (Parallel)
            box_sum(shape, in, out, 9);
        else
            reference::box_sum(shape, in, out, 9);
        benchmark::DoNotOptimize(out.data());
    }
}

void conv_args(benchmark::internal::Benchmark* b) {
    b->Args({2, 8, 33, 1})->Args({8, 16, 33, 2})->Args({16, 16, 17, 2})->Args({32, 16, 33, 1});
    b->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(conv_backward<false>)->Name("conv_backward/reference")->Apply(conv_args);
BENCHMARK(conv_backward<true>)->Name("conv_backward/parallel")->Apply(conv_args);
BENCHMARK(grid_sample<false>)->Name("grid_sample/reference")->Arg(33)->Unit(benchmark::kMillisecond);
BENCHMARK(grid_sample<true>)->Name("grid_sample/parallel")->Arg(33)->Unit(benchmark::kMillisecond);
BENCHMARK(upsample<false>)->Name("upsample/reference")->Arg(17)->Unit(benchmark::kMillisecond);
BENCHMARK(upsample<true>)->Name("upsample/parallel")->Arg(17)->Unit(benchmark::kMillisecond);
BENCHMARK(window_sum<false>)->Name("box_sum/reference")->Arg(33)->Unit(benchmark::kMillisecond);
BENCHMARK(window_sum<true>)->Name("box_sum/parallel")->Arg(33)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
