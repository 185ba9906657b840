#pragma once

#include "steerreg/tensor.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

namespace steerreg::ad {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    std::size_t id() const { return id_; }
    Tape& tape() const { return *tape_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order. A
/// backward closure receives the gradient of its node and adds into the
/// gradients of its inputs through accumulate().
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input (a parameter or an input under test).
    Var leaf(Tensor value);
    /// Non-differentiable input.
    Var constant(Tensor value);
    /// Result of an operation. The closure is kept only if some input needs
    /// a gradient.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

    const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Adds g into the gradient of v (no-op when v needs no gradient).
    void accumulate(Var v, const Tensor& g);
    /// Mutable gradient buffer of v, zero-initialised on first use.
    Tensor& grad_buffer(Var v);

    /// Reverse pass from a scalar. Throws std::invalid_argument otherwise.
    void backward(Var loss);
    /// Gradient after backward(); zeros for unreachable nodes.
    Tensor grad(Var v) const;

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        BackwardFn backward;
        std::optional<Tensor> grad;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
};

// Elementwise. Binary ops require equal shapes, except that the right operand
// may omit the leading batch axis (it is then broadcast over it).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scalar_mul(Var a, double s);
Var add_scalar(Var a, double s);
Var sigmoid(Var a);
/// Subgradient at 0 takes the negative-side slope.
Var leaky_relu(Var a, double slope);
Var square(Var a);
/// sqrt(a + eps)
Var sqrt_eps(Var a, double eps);

// Reductions to a scalar.
Var sum(Var a);
Var mean(Var a);

/// [N,Cin,D,H,W] * [Cout,Cin,K,K,K] cross-correlation with zero padding.
Var conv3d(Var input, Var kernel, int stride, int padding);
/// Adds a per-channel bias [C] to [N,C,...].
Var add_channel_bias(Var input, Var bias);
/// Trilinear x2 upsampling of [N,C,D,H,W], align-corners false.
Var upsample_trilinear(Var input, int factor = 2);
/// out(x) = image(x + u(x)); u is [N,3,D,H,W] ordered (dz, dy, dx), voxels.
Var grid_sample_trilinear(Var image, Var displacement);
/// Concatenates [N,Ci,D,H,W] tensors along the channel axis.
Var concat_channels(const std::vector<Var>& parts);
/// Channels [begin, begin+count) of [N,C,...].
Var slice_channels(Var input, std::size_t begin, std::size_t count);
/// Leading-corner crop of the spatial extents of [N,C,D,H,W].
Var crop_spatial(Var input, std::size_t depth, std::size_t height, std::size_t width);
/// x[i+1] - x[i] along a spatial axis (0 = D, 1 = H, 2 = W) of [N,C,D,H,W].
Var forward_diff(Var input, int axis);
/// Zero-padded centered window^3 sum over the spatial axes of [N,C,D,H,W].
Var box_sum(Var input, std::size_t window);

}  // namespace steerreg::ad
