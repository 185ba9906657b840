#pragma once

// Data-parallel voxel kernels behind the autodiff ops.
//
// Two implementations share each signature: steerreg::kernels (OpenMP,
// im2col + GEMM for convolutions) and steerreg::kernels::reference (direct
// serial loops). The reference versions exist for tests and the benchmark.
//
// All outputs are overwritten, never accumulated. Results are independent of
// the thread count: every reduction runs in a fixed order.

#include "steerreg/tensor.hpp"

#include <cstddef>
#include <span>

namespace steerreg::kernels {

struct ConvGeometry {
    std::size_t batch = 1, in_channels = 1, out_channels = 1;
    std::size_t depth = 1, height = 1, width = 1;
    std::size_t extent = 1, stride = 1, padding = 0;
    std::size_t out_depth = 1, out_height = 1, out_width = 1;

    /// Validates an [N,Cin,D,H,W] input against a [Cout,Cin,K,K,K] kernel.
    static ConvGeometry make(const ad::Shape& input, const ad::Shape& kernel, int stride, int padding);

    std::size_t input_size() const { return batch * in_channels * depth * height * width; }
    std::size_t output_size() const { return batch * out_channels * out_depth * out_height * out_width; }
    std::size_t kernel_size() const { return out_channels * in_channels * extent * extent * extent; }
};

/// [N,C,D,H,W] extents of a dense volume batch.
struct VolumeShape {
    std::size_t batch = 1, channels = 1, depth = 1, height = 1, width = 1;

    static VolumeShape of(const ad::Shape& s);
    std::size_t voxels() const { return depth * height * width; }
    std::size_t size() const { return batch * channels * voxels(); }
};

void conv3d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> kernel,
                    std::span<double> output);
void conv3d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> kernel, std::span<double> grad_input);
void conv3d_backward_kernel(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_kernel);

/// out(x) = image(x + u(x)), u ordered (dz, dy, dx) in voxels, border clamp.
void grid_sample_forward(const VolumeShape& image, std::span<const double> image_data,
                         std::span<const double> displacement, std::span<double> output);
void grid_sample_backward(const VolumeShape& image, std::span<const double> image_data,
                          std::span<const double> displacement, std::span<const double> grad_output,
                          std::span<double> grad_image, std::span<double> grad_displacement);

/// Trilinear x2 upsampling, half-pixel (align-corners false) convention.
void upsample2_forward(const VolumeShape& input, std::span<const double> in, std::span<double> out);
void upsample2_backward(const VolumeShape& input, std::span<const double> grad_out, std::span<double> grad_in);

/// Sum over a centered window^3 neighbourhood with zero padding. Self-adjoint.
void box_sum(const VolumeShape& shape, std::span<const double> in, std::span<double> out, std::size_t window);

/// Worker cap for the OpenMP kernels; initialised from STEERREG_THREADS.
int thread_count();
void set_thread_count(int threads);

namespace reference {

void conv3d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> kernel,
                    std::span<double> output);
void conv3d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> kernel, std::span<double> grad_input);
void conv3d_backward_kernel(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_kernel);
void grid_sample_forward(const VolumeShape& image, std::span<const double> image_data,
                         std::span<const double> displacement, std::span<double> output);
void grid_sample_backward(const VolumeShape& image, std::span<const double> image_data,
                          std::span<const double> displacement, std::span<const double> grad_output,
                          std::span<double> grad_image, std::span<double> grad_displacement);
void upsample2_forward(const VolumeShape& input, std::span<const double> in, std::span<double> out);
void upsample2_backward(const VolumeShape& input, std::span<const double> grad_out, std::span<double> grad_in);
void box_sum(const VolumeShape& shape, std::span<const double> in, std::span<double> out, std::size_t window);

}  // namespace reference

}  // namespace steerreg::kernels
