#include "steerreg/kernels.hpp"

#include <Eigen/Dense>
#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steerreg::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedRowMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedRowMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

int initial_threads() {
    // GEMMs always run inside our own parallel regions.
    Eigen::setNbThreads(1);
    if (const char* env = std::getenv("STEERREG_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

std::atomic<int>& threads_ref() {
    static std::atomic<int> threads{initial_threads()};
    return threads;
}

// Output columns [lo, hi) whose input column xo*stride + kx - pad is in range.
std::pair<std::size_t, std::size_t> valid_x(const ConvGeometry& g, std::size_t kx) {
    const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
    const long off = static_cast<long>(kx) - pad;
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long hi = (static_cast<long>(g.width) - 1 - off) / s + 1;
    if (static_cast<long>(g.width) - 1 - off < 0) hi = 0;
    hi = std::min(hi, static_cast<long>(g.out_width));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Builds the (Cin*K^3) x (Ho*Wo) patch matrix of output slice zo.
void im2col_slice(const ConvGeometry& g, const double* input_n, std::size_t zo, double* col) {
    const std::size_t k = g.extent;
    const std::size_t plane = g.out_height * g.out_width;
    const long pad = static_cast<long>(g.padding);
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        const double* chan = input_n + ci * g.depth * g.height * g.width;
        for (std::size_t kz = 0; kz < k; ++kz) {
            const long z = static_cast<long>(zo * g.stride + kz) - pad;
            const bool z_ok = z >= 0 && z < static_cast<long>(g.depth);
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double* row = col + (((ci * k + kz) * k + ky) * k + kx) * plane;
                    if (!z_ok) {
                        std::fill(row, row + plane, 0.0);
                        continue;
                    }
                    for (std::size_t yo = 0; yo < g.out_height; ++yo) {
                        const long y = static_cast<long>(yo * g.stride + ky) - pad;
                        double* dst = row + yo * g.out_width;
                        if (y < 0 || y >= static_cast<long>(g.height)) {
                            std::fill(dst, dst + g.out_width, 0.0);
                            continue;
                        }
                        const double* src = chan + (static_cast<std::size_t>(z) * g.height + y) * g.width;
                        const auto [lo, hi] = valid_x(g, kx);
                        std::fill(dst, dst + lo, 0.0);
                        std::fill(dst + hi, dst + g.out_width, 0.0);
                        const long x0 = static_cast<long>(kx) - pad;
                        if (g.stride == 1) {
                            std::copy(src + x0 + static_cast<long>(lo), src + x0 + static_cast<long>(hi), dst + lo);
                        } else {
                            for (std::size_t xo = lo; xo < hi; ++xo) dst[xo] = src[static_cast<long>(xo * g.stride) + x0];
                        }
                    }
                }
        }
    }
}

// Scatter-adds a patch-gradient matrix back into the input gradient.
void col2im_slice(const ConvGeometry& g, const double* col, std::size_t zo, double* grad_n) {
    const std::size_t k = g.extent;
    const std::size_t plane = g.out_height * g.out_width;
    const long pad = static_cast<long>(g.padding);
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        double* chan = grad_n + ci * g.depth * g.height * g.width;
        for (std::size_t kz = 0; kz < k; ++kz) {
            const long z = static_cast<long>(zo * g.stride + kz) - pad;
            if (z < 0 || z >= static_cast<long>(g.depth)) continue;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const double* row = col + (((ci * k + kz) * k + ky) * k + kx) * plane;
                    for (std::size_t yo = 0; yo < g.out_height; ++yo) {
                        const long y = static_cast<long>(yo * g.stride + ky) - pad;
                        if (y < 0 || y >= static_cast<long>(g.height)) continue;
                        double* dst = chan + (static_cast<std::size_t>(z) * g.height + y) * g.width;
                        const double* src = row + yo * g.out_width;
                        const auto [lo, hi] = valid_x(g, kx);
                        const long x0 = static_cast<long>(kx) - pad;
                        if (g.stride == 1) {
                            double* d = dst + x0;
                            for (std::size_t xo = lo; xo < hi; ++xo) d[xo] += src[xo];
                        } else {
                            for (std::size_t xo = lo; xo < hi; ++xo) dst[static_cast<long>(xo * g.stride) + x0] += src[xo];
                        }
                    }
                }
        }
    }
}

struct Tap {
    std::size_t i0, i1;
    double t;
    bool clamped;
};

inline Tap warp_tap(double p, std::size_t n) {
    const double hi = static_cast<double>(n - 1);
    bool clamped = false;
    if (p < 0.0) {
        p = 0.0;
        clamped = true;
    } else if (p > hi) {
        p = hi;
        clamped = true;
    }
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(p)), n - 1);
    return {i0, std::min(i0 + 1, n - 1), p - static_cast<double>(i0), clamped};
}

inline Tap upsample_tap(std::size_t o, std::size_t n) {
    const double src = std::max((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0);
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(src)), n - 1);
    return {i0, std::min(i0 + 1, n - 1), src - static_cast<double>(i0), false};
}

// Applies a 1D linear resampling along one axis of a (outer, n, inner) array.
// forward: out(outer, o, inner) = (1-t) in(i0) + t in(i1), o in [0, 2n)
void upsample_axis_forward(const double* in, double* out, std::size_t outer, std::size_t n, std::size_t inner) {
    const std::size_t m = 2 * n;
    std::vector<Tap> taps(m);
    for (std::size_t o = 0; o < m; ++o) taps[o] = upsample_tap(o, n);
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t a = 0; a < outer; ++a) {
        const double* src = in + a * n * inner;
        double* dst = out + a * m * inner;
        for (std::size_t o = 0; o < m; ++o) {
            const Tap& tp = taps[o];
            const double* s0 = src + tp.i0 * inner;
            const double* s1 = src + tp.i1 * inner;
            double* d = dst + o * inner;
            for (std::size_t b = 0; b < inner; ++b) d[b] = (1.0 - tp.t) * s0[b] + tp.t * s1[b];
        }
    }
}

void upsample_axis_backward(const double* grad_out, double* grad_in, std::size_t outer, std::size_t n,
                            std::size_t inner) {
    const std::size_t m = 2 * n;
    std::vector<Tap> taps(m);
    for (std::size_t o = 0; o < m; ++o) taps[o] = upsample_tap(o, n);
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t a = 0; a < outer; ++a) {
        const double* src = grad_out + a * m * inner;
        double* dst = grad_in + a * n * inner;
        std::fill(dst, dst + n * inner, 0.0);
        for (std::size_t o = 0; o < m; ++o) {
            const Tap& tp = taps[o];
            const double* s = src + o * inner;
            double* d0 = dst + tp.i0 * inner;
            double* d1 = dst + tp.i1 * inner;
            for (std::size_t b = 0; b < inner; ++b) {
                d0[b] += (1.0 - tp.t) * s[b];
                d1[b] += tp.t * s[b];
            }
        }
    }
}

// Zero-padded centered window sum along one axis of a (outer, n, inner) array.
void box_axis(const double* in, double* out, std::size_t outer, std::size_t n, std::size_t inner, std::size_t window) {
    const long r = static_cast<long>(window / 2);
    const long nn = static_cast<long>(n);
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t a = 0; a < outer; ++a) {
        const double* src = in + a * n * inner;
        double* dst = out + a * n * inner;
        for (long i = 0; i < nn; ++i) {
            double* d = dst + i * inner;
            std::fill(d, d + inner, 0.0);
            for (long j = std::max(0L, i - r); j <= std::min(nn - 1, i + r); ++j) {
                const double* s = src + j * inner;
                for (std::size_t b = 0; b < inner; ++b) d[b] += s[b];
            }
        }
    }
}

// Stride-1 convolutions on a zero-padded copy flattened per channel: every
// kernel tap becomes a constant column offset, so each tap is one GEMM over a
// contiguous block of columns with no patch matrix.
struct PaddedLayout {
    std::size_t pd, ph, pw, total, max_offset, columns;
    std::vector<std::size_t> offsets;

    explicit PaddedLayout(const ConvGeometry& g)
        : pd(g.depth + 2 * g.padding), ph(g.height + 2 * g.padding), pw(g.width + 2 * g.padding) {
        total = pd * ph * pw;
        const std::size_t k = g.extent;
        for (std::size_t kz = 0; kz < k; ++kz)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) offsets.push_back((kz * ph + ky) * pw + kx);
        max_offset = offsets.back();
        columns = total - max_offset;
    }
    std::size_t flat(std::size_t z, std::size_t y, std::size_t x) const { return (z * ph + y) * pw + x; }
};

constexpr std::size_t kChunk = 1024;
// Kernel gradients have tiny outputs; longer chunks amortise the GEMM setup.
constexpr std::size_t kReduceChunk = 1024;

std::size_t chunk_count(std::size_t columns, std::size_t chunk = kChunk) { return (columns + chunk - 1) / chunk; }

// [C, D, H, W] -> [C, total] with the volume at offset (pad, pad, pad).
void pad_volume(const ConvGeometry& g, const PaddedLayout& L, const double* in, std::size_t channels, double* out) {
    std::fill(out, out + channels * L.total, 0.0);
    const std::size_t p = g.padding;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t z = 0; z < g.depth; ++z)
            for (std::size_t y = 0; y < g.height; ++y) {
                const double* src = in + ((c * g.depth + z) * g.height + y) * g.width;
                std::copy(src, src + g.width, out + c * L.total + L.flat(z + p, y + p, p));
            }
}

// Output [C, Do, Ho, Wo] <-> padded-flat columns starting at `base`.
void scatter_output(const ConvGeometry& g, const PaddedLayout& L, const double* in, std::size_t stride,
                    std::size_t base, double* out) {
    for (std::size_t c = 0; c < g.out_channels; ++c)
        for (std::size_t z = 0; z < g.out_depth; ++z)
            for (std::size_t y = 0; y < g.out_height; ++y) {
                const double* src = in + ((c * g.out_depth + z) * g.out_height + y) * g.out_width;
                std::copy(src, src + g.out_width, out + c * stride + base + L.flat(z, y, 0));
            }
}

void gather_output(const ConvGeometry& g, const PaddedLayout& L, const double* in, std::size_t stride, double* out) {
    for (std::size_t c = 0; c < g.out_channels; ++c)
        for (std::size_t z = 0; z < g.out_depth; ++z)
            for (std::size_t y = 0; y < g.out_height; ++y) {
                const double* src = in + c * stride + L.flat(z, y, 0);
                std::copy(src, src + g.out_width, out + ((c * g.out_depth + z) * g.out_height + y) * g.out_width);
            }
}

// Kernel [Cout, Cin, K^3] -> one Cout x Cin matrix per tap.
std::vector<RowMat> split_taps(const ConvGeometry& g, const double* kernel) {
    const std::size_t taps = g.extent * g.extent * g.extent;
    std::vector<RowMat> w(taps, RowMat(g.out_channels, g.in_channels));
    for (std::size_t o = 0; o < g.out_channels; ++o)
        for (std::size_t i = 0; i < g.in_channels; ++i)
            for (std::size_t t = 0; t < taps; ++t) w[t](o, i) = kernel[(o * g.in_channels + i) * taps + t];
    return w;
}

void forward_unit_stride(const ConvGeometry& g, const double* input, const double* kernel, double* output) {
    const PaddedLayout L(g);
    const std::vector<RowMat> w = split_taps(g, kernel);
    std::vector<double> padded(g.in_channels * L.total), flat(g.out_channels * L.columns);
    const std::size_t chunks = chunk_count(L.columns);
    for (std::size_t n = 0; n < g.batch; ++n) {
        pad_volume(g, L, input + n * g.in_channels * g.depth * g.height * g.width, g.in_channels, padded.data());
#pragma omp parallel for schedule(static) num_threads(thread_count())
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t q0 = c * kChunk, len = std::min(kChunk, L.columns - q0);
            StridedRowMap out(flat.data() + q0, g.out_channels, len, Eigen::OuterStride<>(L.columns));
            out.setZero();
            for (std::size_t t = 0; t < w.size(); ++t) {
                ConstStridedRowMap in(padded.data() + q0 + L.offsets[t], g.in_channels, len,
                                      Eigen::OuterStride<>(L.total));
                out.noalias() += w[t] * in;
            }
        }
        gather_output(g, L, flat.data(), L.columns,
                      output + n * g.out_channels * g.out_depth * g.out_height * g.out_width);
    }
}

void backward_input_unit_stride(const ConvGeometry& g, const double* grad_output, const double* kernel,
                                double* grad_input) {
    const PaddedLayout L(g);
    const std::vector<RowMat> w = split_taps(g, kernel);
    // Output gradient shifted right by max_offset so every gather column is in range.
    const std::size_t span = L.max_offset + L.total;
    std::vector<double> shifted(g.out_channels * span), padded(g.in_channels * L.total);
    const std::size_t chunks = chunk_count(L.total);
    for (std::size_t n = 0; n < g.batch; ++n) {
        std::fill(shifted.begin(), shifted.end(), 0.0);
        scatter_output(g, L, grad_output + n * g.out_channels * g.out_depth * g.out_height * g.out_width, span,
                       L.max_offset, shifted.data());
#pragma omp parallel for schedule(static) num_threads(thread_count())
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t p0 = c * kChunk, len = std::min(kChunk, L.total - p0);
            StridedRowMap out(padded.data() + p0, g.in_channels, len, Eigen::OuterStride<>(L.total));
            out.setZero();
            for (std::size_t t = 0; t < w.size(); ++t) {
                ConstStridedRowMap go(shifted.data() + L.max_offset + p0 - L.offsets[t], g.out_channels, len,
                                      Eigen::OuterStride<>(span));
                out.noalias() += w[t].transpose() * go;
            }
        }
        double* gi = grad_input + n * g.in_channels * g.depth * g.height * g.width;
        const std::size_t p = g.padding;
        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t z = 0; z < g.depth; ++z)
                for (std::size_t y = 0; y < g.height; ++y) {
                    const double* src = padded.data() + ci * L.total + L.flat(z + p, y + p, p);
                    std::copy(src, src + g.width, gi + ((ci * g.depth + z) * g.height + y) * g.width);
                }
    }
}

void backward_kernel_unit_stride(const ConvGeometry& g, const double* input, const double* grad_output,
                                 double* grad_kernel) {
    const PaddedLayout L(g);
    const std::size_t taps = L.offsets.size();
    std::vector<double> padded(g.in_channels * L.total), flat(g.out_channels * L.columns);
    const std::size_t chunks = chunk_count(L.columns, kReduceChunk);
    const std::size_t wsize = g.out_channels * g.in_channels;
    // Per-chunk partials reduced in chunk order keep the sum thread-count independent.
    std::vector<double> partial(g.batch * chunks * taps * wsize);
    for (std::size_t n = 0; n < g.batch; ++n) {
        pad_volume(g, L, input + n * g.in_channels * g.depth * g.height * g.width, g.in_channels, padded.data());
        std::fill(flat.begin(), flat.end(), 0.0);
        scatter_output(g, L, grad_output + n * g.out_channels * g.out_depth * g.out_height * g.out_width, L.columns,
                       0, flat.data());
#pragma omp parallel for schedule(static) num_threads(thread_count())
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t q0 = c * kReduceChunk, len = std::min(kReduceChunk, L.columns - q0);
            double* part = partial.data() + (n * chunks + c) * taps * wsize;
            if (wsize > 64) {
                ConstStridedRowMap go(flat.data() + q0, g.out_channels, len, Eigen::OuterStride<>(L.columns));
                for (std::size_t t = 0; t < taps; ++t) {
                    ConstStridedRowMap in(padded.data() + q0 + L.offsets[t], g.in_channels, len,
                                          Eigen::OuterStride<>(L.total));
                    Eigen::Map<RowMat>(part + t * wsize, g.out_channels, g.in_channels).noalias() =
                        go * in.transpose();
                }
                continue;
            }
            // Few channel pairs: plain dot products beat a GEMM call per tap.
            for (std::size_t t = 0; t < taps; ++t)
                for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
                    const double* a = padded.data() + ci * L.total + q0 + L.offsets[t];
                    for (std::size_t co = 0; co < g.out_channels; ++co) {
                        const double* b = flat.data() + co * L.columns + q0;
                        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
                        for (std::size_t q = 0; q < len; ++q) acc += a[q] * b[q];
                        part[t * wsize + co * g.in_channels + ci] = acc;
                    }
                }
        }
    }
    std::fill(grad_kernel, grad_kernel + wsize * taps, 0.0);
    for (std::size_t b = 0; b < g.batch * chunks; ++b)
        for (std::size_t t = 0; t < taps; ++t) {
            const double* p = partial.data() + (b * taps + t) * wsize;
            for (std::size_t o = 0; o < g.out_channels; ++o)
                for (std::size_t i = 0; i < g.in_channels; ++i)
                    grad_kernel[(o * g.in_channels + i) * taps + t] += p[o * g.in_channels + i];
        }
}

}  // namespace

int thread_count() { return threads_ref().load(std::memory_order_relaxed); }

void set_thread_count(int threads) {
    Eigen::setNbThreads(1);
    threads_ref().store(std::max(1, threads), std::memory_order_relaxed);
}

ConvGeometry ConvGeometry::make(const ad::Shape& input, const ad::Shape& kernel, int stride, int padding) {
    if (input.size() != 5)
        throw std::invalid_argument("conv3d input must be [N,Cin,D,H,W], got " + ad::shape_string(input));
    if (kernel.size() != 5)
        throw std::invalid_argument("conv3d kernel must be [Cout,Cin,K,K,K], got " + ad::shape_string(kernel));
    if (stride < 1) throw std::invalid_argument("conv3d stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv3d padding must be >= 0");
    if (input[1] != kernel[1])
        throw std::invalid_argument("conv3d channel mismatch: input Cin=" + std::to_string(input[1]) +
                                    " but kernel Cin=" + std::to_string(kernel[1]));
    if (kernel[2] != kernel[3] || kernel[3] != kernel[4])
        throw std::invalid_argument("conv3d kernel must be cubic, got " + ad::shape_string(kernel));
    if (kernel[2] % 2 == 0) throw std::invalid_argument("conv3d kernel extent must be odd");
    ConvGeometry g;
    g.batch = input[0];
    g.in_channels = input[1];
    g.depth = input[2];
    g.height = input[3];
    g.width = input[4];
    g.out_channels = kernel[0];
    g.extent = kernel[2];
    g.stride = static_cast<std::size_t>(stride);
    g.padding = static_cast<std::size_t>(padding);
    const char* names[3] = {"D", "H", "W"};
    const std::size_t dims[3] = {g.depth, g.height, g.width};
    std::size_t outs[3];
    for (int a = 0; a < 3; ++a) {
        if (dims[a] == 0) throw std::invalid_argument(std::string("conv3d input extent ") + names[a] + " is zero");
        if (dims[a] + 2 * g.padding < g.extent)
            throw std::invalid_argument(std::string("conv3d input extent ") + names[a] + "=" +
                                        std::to_string(dims[a]) + " smaller than kernel extent " +
                                        std::to_string(g.extent) + " after padding");
        outs[a] = (dims[a] + 2 * g.padding - g.extent) / g.stride + 1;
    }
    g.out_depth = outs[0];
    g.out_height = outs[1];
    g.out_width = outs[2];
    return g;
}

VolumeShape VolumeShape::of(const ad::Shape& s) {
    if (s.size() != 5) throw std::invalid_argument("expected [N,C,D,H,W] volume, got " + ad::shape_string(s));
    return {s[0], s[1], s[2], s[3], s[4]};
}

void conv3d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> kernel,
                    std::span<double> output) {
    if (g.stride == 1) return forward_unit_stride(g, input.data(), kernel.data(), output.data());
    const std::size_t rows = g.in_channels * g.extent * g.extent * g.extent;
    const std::size_t plane = g.out_height * g.out_width;
    const std::size_t slices = g.batch * g.out_depth;
    const Eigen::Map<const RowMat> w(kernel.data(), g.out_channels, rows);
#pragma omp parallel num_threads(thread_count())
    {
        std::vector<double> col(rows * plane);
#pragma omp for schedule(static)
        for (std::size_t s = 0; s < slices; ++s) {
            const std::size_t n = s / g.out_depth, zo = s % g.out_depth;
            im2col_slice(g, input.data() + n * g.in_channels * g.depth * g.height * g.width, zo, col.data());
            const Eigen::Map<const RowMat> c(col.data(), rows, plane);
            StridedRowMap out(output.data() + (n * g.out_channels * g.out_depth + zo) * plane, g.out_channels, plane,
                              Eigen::OuterStride<>(g.out_depth * plane));
            out.noalias() = w * c;
        }
    }
}

void conv3d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> kernel, std::span<double> grad_input) {
    if (g.stride == 1) return backward_input_unit_stride(g, grad_output.data(), kernel.data(), grad_input.data());
    std::fill(grad_input.begin(), grad_input.end(), 0.0);
    const std::size_t rows = g.in_channels * g.extent * g.extent * g.extent;
    const std::size_t plane = g.out_height * g.out_width;
    const std::size_t slices = g.batch * g.out_depth;
    const Eigen::Map<const RowMat> w(kernel.data(), g.out_channels, rows);
#pragma omp parallel num_threads(thread_count())
    {
        std::vector<double> col(rows * plane);
#pragma omp for ordered schedule(static, 1)
        for (std::size_t s = 0; s < slices; ++s) {
            const std::size_t n = s / g.out_depth, zo = s % g.out_depth;
            ConstStridedRowMap go(grad_output.data() + (n * g.out_channels * g.out_depth + zo) * plane,
                                  g.out_channels, plane, Eigen::OuterStride<>(g.out_depth * plane));
            Eigen::Map<RowMat> c(col.data(), rows, plane);
            c.noalias() = w.transpose() * go;
#pragma omp ordered
            col2im_slice(g, col.data(), zo, grad_input.data() + n * g.in_channels * g.depth * g.height * g.width);
        }
    }
}

void conv3d_backward_kernel(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_kernel) {
    if (g.stride == 1) return backward_kernel_unit_stride(g, input.data(), grad_output.data(), grad_kernel.data());
    const std::size_t rows = g.in_channels * g.extent * g.extent * g.extent;
    const std::size_t plane = g.out_height * g.out_width;
    const std::size_t slices = g.batch * g.out_depth;
    const std::size_t wsize = g.out_channels * rows;
    std::vector<double> partial(slices * wsize);
#pragma omp parallel num_threads(thread_count())
    {
        std::vector<double> col(rows * plane);
#pragma omp for schedule(static)
        for (std::size_t s = 0; s < slices; ++s) {
            const std::size_t n = s / g.out_depth, zo = s % g.out_depth;
            im2col_slice(g, input.data() + n * g.in_channels * g.depth * g.height * g.width, zo, col.data());
            const Eigen::Map<const RowMat> c(col.data(), rows, plane);
            ConstStridedRowMap go(grad_output.data() + (n * g.out_channels * g.out_depth + zo) * plane,
                                  g.out_channels, plane, Eigen::OuterStride<>(g.out_depth * plane));
            Eigen::Map<RowMat> p(partial.data() + s * wsize, g.out_channels, rows);
            p.noalias() = go * c.transpose();
        }
    }
    std::fill(grad_kernel.begin(), grad_kernel.end(), 0.0);
    for (std::size_t s = 0; s < slices; ++s) {
        const double* p = partial.data() + s * wsize;
        for (std::size_t i = 0; i < wsize; ++i) grad_kernel[i] += p[i];
    }
}

void grid_sample_forward(const VolumeShape& s, std::span<const double> image, std::span<const double> disp,
                         std::span<double> output) {
    const std::size_t vox = s.voxels();
    const std::size_t rows = s.batch * s.depth;
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t n = r / s.depth, z = r % s.depth;
        for (std::size_t y = 0; y < s.height; ++y)
            for (std::size_t x = 0; x < s.width; ++x) {
                const std::size_t v = (z * s.height + y) * s.width + x;
                const double* u = disp.data() + n * 3 * vox + v;
                const Tap tz = warp_tap(static_cast<double>(z) + u[0], s.depth);
                const Tap ty = warp_tap(static_cast<double>(y) + u[vox], s.height);
                const Tap tx = warp_tap(static_cast<double>(x) + u[2 * vox], s.width);
                const std::size_t o00 = (tz.i0 * s.height + ty.i0) * s.width;
                const std::size_t o01 = (tz.i0 * s.height + ty.i1) * s.width;
                const std::size_t o10 = (tz.i1 * s.height + ty.i0) * s.width;
                const std::size_t o11 = (tz.i1 * s.height + ty.i1) * s.width;
                const double az = 1 - tz.t, ay = 1 - ty.t, ax = 1 - tx.t;
                for (std::size_t c = 0; c < s.channels; ++c) {
                    const double* img = image.data() + (n * s.channels + c) * vox;
                    double acc = 0.0;
                    acc += az * ay * ax * img[o00 + tx.i0];
                    acc += az * ay * tx.t * img[o00 + tx.i1];
                    acc += az * ty.t * ax * img[o01 + tx.i0];
                    acc += az * ty.t * tx.t * img[o01 + tx.i1];
                    acc += tz.t * ay * ax * img[o10 + tx.i0];
                    acc += tz.t * ay * tx.t * img[o10 + tx.i1];
                    acc += tz.t * ty.t * ax * img[o11 + tx.i0];
                    acc += tz.t * ty.t * tx.t * img[o11 + tx.i1];
                    output[(n * s.channels + c) * vox + v] = acc;
                }
            }
    }
}

void grid_sample_backward(const VolumeShape& s, std::span<const double> image, std::span<const double> disp,
                          std::span<const double> grad_output, std::span<double> grad_image,
                          std::span<double> grad_disp) {
    const std::size_t vox = s.voxels();
    const std::size_t rows = s.batch * s.depth;
    // Displacement gradient: gather, race-free.
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t n = r / s.depth, z = r % s.depth;
        for (std::size_t y = 0; y < s.height; ++y)
            for (std::size_t x = 0; x < s.width; ++x) {
                const std::size_t v = (z * s.height + y) * s.width + x;
                const double* u = disp.data() + n * 3 * vox + v;
                const Tap tz = warp_tap(static_cast<double>(z) + u[0], s.depth);
                const Tap ty = warp_tap(static_cast<double>(y) + u[vox], s.height);
                const Tap tx = warp_tap(static_cast<double>(x) + u[2 * vox], s.width);
                const double wz[2] = {1 - tz.t, tz.t}, wy[2] = {1 - ty.t, ty.t}, wx[2] = {1 - tx.t, tx.t};
                const std::size_t iz[2] = {tz.i0, tz.i1}, iy[2] = {ty.i0, ty.i1}, ix[2] = {tx.i0, tx.i1};
                const double sg[2] = {-1.0, 1.0};
                double gz = 0.0, gy = 0.0, gx = 0.0;
                for (std::size_t c = 0; c < s.channels; ++c) {
                    const std::size_t base = (n * s.channels + c) * vox;
                    const double go = grad_output[base + v];
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int e = 0; e < 2; ++e) {
                                const double val = image[base + (iz[a] * s.height + iy[b]) * s.width + ix[e]];
                                gz += go * val * sg[a] * wy[b] * wx[e];
                                gy += go * val * wz[a] * sg[b] * wx[e];
                                gx += go * val * wz[a] * wy[b] * sg[e];
                            }
                }
                double* gu = grad_disp.data() + n * 3 * vox + v;
                gu[0] = tz.clamped ? 0.0 : gz;
                gu[vox] = ty.clamped ? 0.0 : gy;
                gu[2 * vox] = tx.clamped ? 0.0 : gx;
            }
    }
    // Image gradient: scatter, kept serial for a fixed accumulation order.
    std::fill(grad_image.begin(), grad_image.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t n = r / s.depth, z = r % s.depth;
        for (std::size_t y = 0; y < s.height; ++y)
            for (std::size_t x = 0; x < s.width; ++x) {
                const std::size_t v = (z * s.height + y) * s.width + x;
                const double* u = disp.data() + n * 3 * vox + v;
                const Tap tz = warp_tap(static_cast<double>(z) + u[0], s.depth);
                const Tap ty = warp_tap(static_cast<double>(y) + u[vox], s.height);
                const Tap tx = warp_tap(static_cast<double>(x) + u[2 * vox], s.width);
                const double wz[2] = {1 - tz.t, tz.t}, wy[2] = {1 - ty.t, ty.t}, wx[2] = {1 - tx.t, tx.t};
                const std::size_t iz[2] = {tz.i0, tz.i1}, iy[2] = {ty.i0, ty.i1}, ix[2] = {tx.i0, tx.i1};
                for (std::size_t c = 0; c < s.channels; ++c) {
                    const std::size_t base = (n * s.channels + c) * vox;
                    const double go = grad_output[base + v];
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int e = 0; e < 2; ++e)
                                grad_image[base + (iz[a] * s.height + iy[b]) * s.width + ix[e]] +=
                                    go * wz[a] * wy[b] * wx[e];
                }
            }
    }
}

void upsample2_forward(const VolumeShape& s, std::span<const double> in, std::span<double> out) {
    const std::size_t nc = s.batch * s.channels;
    const std::size_t d = s.depth, h = s.height, w = s.width;
    std::vector<double> tx(nc * d * h * 2 * w);
    std::vector<double> ty(nc * d * 2 * h * 2 * w);
    upsample_axis_forward(in.data(), tx.data(), nc * d * h, w, 1);
    upsample_axis_forward(tx.data(), ty.data(), nc * d, h, 2 * w);
    upsample_axis_forward(ty.data(), out.data(), nc, d, 4 * h * w);
}

void upsample2_backward(const VolumeShape& s, std::span<const double> grad_out, std::span<double> grad_in) {
    const std::size_t nc = s.batch * s.channels;
    const std::size_t d = s.depth, h = s.height, w = s.width;
    std::vector<double> ty(nc * d * 2 * h * 2 * w);
    std::vector<double> tx(nc * d * h * 2 * w);
    upsample_axis_backward(grad_out.data(), ty.data(), nc, d, 4 * h * w);
    upsample_axis_backward(ty.data(), tx.data(), nc * d, h, 2 * w);
    upsample_axis_backward(tx.data(), grad_in.data(), nc * d * h, w, 1);
}

void box_sum(const VolumeShape& s, std::span<const double> in, std::span<double> out, std::size_t window) {
    if (window % 2 == 0) throw std::invalid_argument("box window must be odd");
    const std::size_t nc = s.batch * s.channels;
    std::vector<double> a(s.size()), b(s.size());
    box_axis(in.data(), a.data(), nc * s.depth * s.height, s.width, 1, window);
    box_axis(a.data(), b.data(), nc * s.depth, s.height, s.width, window);
    box_axis(b.data(), out.data(), nc, s.depth, s.height * s.width, window);
}

}  // namespace steerreg::kernels
