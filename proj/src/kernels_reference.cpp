#include "steerreg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace steerreg::kernels::reference {

namespace {

struct AxisSample {
    std::size_t i0, i1;
    double t;
    bool clamped;
};

AxisSample sample_axis(double p, std::size_t n) {
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
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    return {i0, i1, p - static_cast<double>(i0), clamped};
}

AxisSample upsample_axis(std::size_t o, std::size_t n) {
    const double src = std::max((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0);
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(src)), n - 1);
    return {i0, std::min(i0 + 1, n - 1), src - static_cast<double>(i0), false};
}

}  // namespace

void conv3d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> kernel,
                    std::span<double> output) {
    const long pad = static_cast<long>(g.padding);
    const std::size_t k = g.extent;
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t zo = 0; zo < g.out_depth; ++zo)
                for (std::size_t yo = 0; yo < g.out_height; ++yo)
                    for (std::size_t xo = 0; xo < g.out_width; ++xo) {
                        double acc = 0.0;
                        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                            for (std::size_t kz = 0; kz < k; ++kz)
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long z = static_cast<long>(zo * g.stride + kz) - pad;
                                        const long y = static_cast<long>(yo * g.stride + ky) - pad;
                                        const long x = static_cast<long>(xo * g.stride + kx) - pad;
                                        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(g.depth) ||
                                            y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width))
                                            continue;
                                        const double v =
                                            input[(((n * g.in_channels + ci) * g.depth + z) * g.height + y) * g.width + x];
                                        const double w = kernel[(((co * g.in_channels + ci) * k + kz) * k + ky) * k + kx];
                                        acc += v * w;
                                    }
                        output[(((n * g.out_channels + co) * g.out_depth + zo) * g.out_height + yo) * g.out_width + xo] =
                            acc;
                    }
}

void conv3d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> kernel, std::span<double> grad_input) {
    std::fill(grad_input.begin(), grad_input.end(), 0.0);
    const long pad = static_cast<long>(g.padding);
    const std::size_t k = g.extent;
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t zo = 0; zo < g.out_depth; ++zo)
                for (std::size_t yo = 0; yo < g.out_height; ++yo)
                    for (std::size_t xo = 0; xo < g.out_width; ++xo) {
                        const double go =
                            grad_output[(((n * g.out_channels + co) * g.out_depth + zo) * g.out_height + yo) *
                                            g.out_width + xo];
                        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                            for (std::size_t kz = 0; kz < k; ++kz)
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long z = static_cast<long>(zo * g.stride + kz) - pad;
                                        const long y = static_cast<long>(yo * g.stride + ky) - pad;
                                        const long x = static_cast<long>(xo * g.stride + kx) - pad;
                                        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(g.depth) ||
                                            y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width))
                                            continue;
                                        grad_input[(((n * g.in_channels + ci) * g.depth + z) * g.height + y) * g.width +
                                                   x] +=
                                            go * kernel[(((co * g.in_channels + ci) * k + kz) * k + ky) * k + kx];
                                    }
                    }
}

void conv3d_backward_kernel(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_kernel) {
    std::fill(grad_kernel.begin(), grad_kernel.end(), 0.0);
    const long pad = static_cast<long>(g.padding);
    const std::size_t k = g.extent;
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t co = 0; co < g.out_channels; ++co)
            for (std::size_t zo = 0; zo < g.out_depth; ++zo)
                for (std::size_t yo = 0; yo < g.out_height; ++yo)
                    for (std::size_t xo = 0; xo < g.out_width; ++xo) {
                        const double go =
                            grad_output[(((n * g.out_channels + co) * g.out_depth + zo) * g.out_height + yo) *
                                            g.out_width + xo];
                        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                            for (std::size_t kz = 0; kz < k; ++kz)
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const long z = static_cast<long>(zo * g.stride + kz) - pad;
                                        const long y = static_cast<long>(yo * g.stride + ky) - pad;
                                        const long x = static_cast<long>(xo * g.stride + kx) - pad;
                                        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(g.depth) ||
                                            y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width))
                                            continue;
                                        grad_kernel[(((co * g.in_channels + ci) * k + kz) * k + ky) * k + kx] +=
                                            go * input[(((n * g.in_channels + ci) * g.depth + z) * g.height + y) *
                                                           g.width + x];
                                    }
                    }
}

void grid_sample_forward(const VolumeShape& s, std::span<const double> image, std::span<const double> disp,
                         std::span<double> output) {
    const std::size_t vox = s.voxels();
    for (std::size_t n = 0; n < s.batch; ++n)
        for (std::size_t z = 0; z < s.depth; ++z)
            for (std::size_t y = 0; y < s.height; ++y)
                for (std::size_t x = 0; x < s.width; ++x) {
                    const std::size_t v = (z * s.height + y) * s.width + x;
                    const double* u = disp.data() + n * 3 * vox + v;
                    const AxisSample az = sample_axis(static_cast<double>(z) + u[0], s.depth);
                    const AxisSample ay = sample_axis(static_cast<double>(y) + u[vox], s.height);
                    const AxisSample ax = sample_axis(static_cast<double>(x) + u[2 * vox], s.width);
                    for (std::size_t c = 0; c < s.channels; ++c) {
                        const double* img = image.data() + (n * s.channels + c) * vox;
                        auto at = [&](std::size_t zz, std::size_t yy, std::size_t xx) {
                            return img[(zz * s.height + yy) * s.width + xx];
                        };
                        double acc = 0.0;
                        acc += (1 - az.t) * (1 - ay.t) * (1 - ax.t) * at(az.i0, ay.i0, ax.i0);
                        acc += (1 - az.t) * (1 - ay.t) * ax.t * at(az.i0, ay.i0, ax.i1);
                        acc += (1 - az.t) * ay.t * (1 - ax.t) * at(az.i0, ay.i1, ax.i0);
                        acc += (1 - az.t) * ay.t * ax.t * at(az.i0, ay.i1, ax.i1);
                        acc += az.t * (1 - ay.t) * (1 - ax.t) * at(az.i1, ay.i0, ax.i0);
                        acc += az.t * (1 - ay.t) * ax.t * at(az.i1, ay.i0, ax.i1);
                        acc += az.t * ay.t * (1 - ax.t) * at(az.i1, ay.i1, ax.i0);
                        acc += az.t * ay.t * ax.t * at(az.i1, ay.i1, ax.i1);
                        output[(n * s.channels + c) * vox + v] = acc;
                    }
                }
}

void grid_sample_backward(const VolumeShape& s, std::span<const double> image, std::span<const double> disp,
                          std::span<const double> grad_output, std::span<double> grad_image,
                          std::span<double> grad_disp) {
    std::fill(grad_image.begin(), grad_image.end(), 0.0);
    std::fill(grad_disp.begin(), grad_disp.end(), 0.0);
    const std::size_t vox = s.voxels();
    for (std::size_t n = 0; n < s.batch; ++n)
        for (std::size_t z = 0; z < s.depth; ++z)
            for (std::size_t y = 0; y < s.height; ++y)
                for (std::size_t x = 0; x < s.width; ++x) {
                    const std::size_t v = (z * s.height + y) * s.width + x;
                    const double* u = disp.data() + n * 3 * vox + v;
                    const AxisSample az = sample_axis(static_cast<double>(z) + u[0], s.depth);
                    const AxisSample ay = sample_axis(static_cast<double>(y) + u[vox], s.height);
                    const AxisSample ax = sample_axis(static_cast<double>(x) + u[2 * vox], s.width);
                    double gz = 0.0, gy = 0.0, gx = 0.0;
                    for (std::size_t c = 0; c < s.channels; ++c) {
                        const std::size_t base = (n * s.channels + c) * vox;
                        const double go = grad_output[base + v];
                        auto idx = [&](std::size_t zz, std::size_t yy, std::size_t xx) {
                            return base + (zz * s.height + yy) * s.width + xx;
                        };
                        const double wz[2] = {1 - az.t, az.t}, wy[2] = {1 - ay.t, ay.t}, wx[2] = {1 - ax.t, ax.t};
                        const std::size_t iz[2] = {az.i0, az.i1}, iy[2] = {ay.i0, ay.i1}, ix[2] = {ax.i0, ax.i1};
                        const double sz[2] = {-1.0, 1.0};
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int cc = 0; cc < 2; ++cc) {
                                    const std::size_t j = idx(iz[a], iy[b], ix[cc]);
                                    grad_image[j] += go * wz[a] * wy[b] * wx[cc];
                                    const double val = image[j];
                                    gz += go * val * sz[a] * wy[b] * wx[cc];
                                    gy += go * val * wz[a] * sz[b] * wx[cc];
                                    gx += go * val * wz[a] * wy[b] * sz[cc];
                                }
                    }
                    double* gu = grad_disp.data() + n * 3 * vox + v;
                    gu[0] = az.clamped ? 0.0 : gz;
                    gu[vox] = ay.clamped ? 0.0 : gy;
                    gu[2 * vox] = ax.clamped ? 0.0 : gx;
                }
}

void upsample2_forward(const VolumeShape& s, std::span<const double> in, std::span<double> out) {
    const std::size_t od = 2 * s.depth, oh = 2 * s.height, ow = 2 * s.width;
    for (std::size_t nc = 0; nc < s.batch * s.channels; ++nc) {
        const double* src = in.data() + nc * s.voxels();
        double* dst = out.data() + nc * od * oh * ow;
        for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    const AxisSample az = upsample_axis(z, s.depth);
                    const AxisSample ay = upsample_axis(y, s.height);
                    const AxisSample ax = upsample_axis(x, s.width);
                    auto at = [&](std::size_t zz, std::size_t yy, std::size_t xx) {
                        return src[(zz * s.height + yy) * s.width + xx];
                    };
                    double acc = 0.0;
                    acc += (1 - az.t) * (1 - ay.t) * (1 - ax.t) * at(az.i0, ay.i0, ax.i0);
                    acc += (1 - az.t) * (1 - ay.t) * ax.t * at(az.i0, ay.i0, ax.i1);
                    acc += (1 - az.t) * ay.t * (1 - ax.t) * at(az.i0, ay.i1, ax.i0);
                    acc += (1 - az.t) * ay.t * ax.t * at(az.i0, ay.i1, ax.i1);
                    acc += az.t * (1 - ay.t) * (1 - ax.t) * at(az.i1, ay.i0, ax.i0);
                    acc += az.t * (1 - ay.t) * ax.t * at(az.i1, ay.i0, ax.i1);
                    acc += az.t * ay.t * (1 - ax.t) * at(az.i1, ay.i1, ax.i0);
                    acc += az.t * ay.t * ax.t * at(az.i1, ay.i1, ax.i1);
                    dst[(z * oh + y) * ow + x] = acc;
                }
    }
}

void upsample2_backward(const VolumeShape& s, std::span<const double> grad_out, std::span<double> grad_in) {
    std::fill(grad_in.begin(), grad_in.end(), 0.0);
    const std::size_t od = 2 * s.depth, oh = 2 * s.height, ow = 2 * s.width;
    for (std::size_t nc = 0; nc < s.batch * s.channels; ++nc) {
        const double* go = grad_out.data() + nc * od * oh * ow;
        double* gi = grad_in.data() + nc * s.voxels();
        for (std::size_t z = 0; z < od; ++z)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    const AxisSample az = upsample_axis(z, s.depth);
                    const AxisSample ay = upsample_axis(y, s.height);
                    const AxisSample ax = upsample_axis(x, s.width);
                    const double g = go[(z * oh + y) * ow + x];
                    const double wz[2] = {1 - az.t, az.t}, wy[2] = {1 - ay.t, ay.t}, wx[2] = {1 - ax.t, ax.t};
                    const std::size_t iz[2] = {az.i0, az.i1}, iy[2] = {ay.i0, ay.i1}, ix[2] = {ax.i0, ax.i1};
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int c = 0; c < 2; ++c)
                                gi[(iz[a] * s.height + iy[b]) * s.width + ix[c]] += g * wz[a] * wy[b] * wx[c];
                }
    }
}

void box_sum(const VolumeShape& s, std::span<const double> in, std::span<double> out, std::size_t window) {
    if (window % 2 == 0) throw std::invalid_argument("box window must be odd");
    const long r = static_cast<long>(window / 2);
    const long d = static_cast<long>(s.depth), h = static_cast<long>(s.height), w = static_cast<long>(s.width);
    for (std::size_t nc = 0; nc < s.batch * s.channels; ++nc) {
        const double* src = in.data() + nc * s.voxels();
        double* dst = out.data() + nc * s.voxels();
        for (long z = 0; z < d; ++z)
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x) {
                    double acc = 0.0;
                    for (long a = std::max(0L, z - r); a <= std::min(d - 1, z + r); ++a)
                        for (long b = std::max(0L, y - r); b <= std::min(h - 1, y + r); ++b)
                            for (long c = std::max(0L, x - r); c <= std::min(w - 1, x + r); ++c)
                                acc += src[(a * h + b) * w + c];
                    dst[(z * h + y) * w + x] = acc;
                }
    }
}

}  // namespace steerreg::kernels::reference
