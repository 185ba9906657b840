#include "steerreg/autodiff.hpp"

#include "steerreg/kernels.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace steerreg::ad {

const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    return tape_->value(*this);
}

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
        if (&v.tape() != this) throw std::logic_error("operands recorded on different tapes");
        n.requires_grad = n.requires_grad || requires_grad(v);
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var v) {
    Node& n = nodes_.at(v.id());
    if (!n.grad) n.grad = Tensor(n.value.shape(), 0.0);
    return *n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
    if (!requires_grad(v)) return;
    Node& n = nodes_.at(v.id());
    if (!n.grad) {
        if (g.size() != n.value.size()) throw std::logic_error("gradient size mismatch");
        n.grad = g.reshaped(n.value.shape());
    } else {
        n.grad->add_in_place(g);
    }
}

void Tape::backward(Var loss) {
    if (value(loss).size() != 1)
        throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    for (auto& n : nodes_) n.grad.reset();
    if (!requires_grad(loss)) return;
    nodes_[loss.id()].grad = Tensor(value(loss).shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.grad || !n.backward) continue;
        // The closure may append to other nodes' gradients but never to its own.
        const Tensor g = *n.grad;
        n.backward(*this, g);
    }
}

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad ? *n.grad : Tensor(n.value.shape(), 0.0);
}

namespace {

// Number of times b repeats inside a (1 when shapes are equal).
std::size_t broadcast_repeat(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return 1;
    if (a.rank() == b.rank() + 1 && std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1))
        return a.shape()[0];
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

// Sums a gradient shaped like a down to b's shape.
Tensor reduce_repeat(const Tensor& g, const Shape& b_shape, std::size_t repeat) {
    if (repeat == 1) return g;
    Tensor out(b_shape, 0.0);
    const std::size_t m = out.size();
    for (std::size_t r = 0; r < repeat; ++r)
        for (std::size_t i = 0; i < m; ++i) out[i] += g[r * m + i];
    return out;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t rep = broadcast_repeat(av, bv, "add");
    Tensor out(av.shape());
    const std::size_t m = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % m];
    return a.tape().record(std::move(out), {a, b}, [a, b, rep](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, reduce_repeat(g, b.value().shape(), rep));
    });
}

Var sub(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t rep = broadcast_repeat(av, bv, "sub");
    Tensor out(av.shape());
    const std::size_t m = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % m];
    return a.tape().record(std::move(out), {a, b}, [a, b, rep](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        Tensor gb = reduce_repeat(g, b.value().shape(), rep);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -gb[i];
        t.accumulate(b, gb);
    });
}

Var mul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t rep = broadcast_repeat(av, bv, "mul");
    Tensor out(av.shape());
    const std::size_t m = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % m];
    return a.tape().record(std::move(out), {a, b}, [a, b, rep](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const std::size_t m = bv.size();
        if (t.requires_grad(a)) {
            Tensor ga(av.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * bv[i % m];
            t.accumulate(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb(av.shape());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * av[i];
            t.accumulate(b, reduce_repeat(gb, bv.shape(), rep));
        }
    });
}

Var div(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t rep = broadcast_repeat(av, bv, "div");
    Tensor out(av.shape());
    const std::size_t m = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i % m];
    return a.tape().record(std::move(out), {a, b}, [a, b, rep](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const std::size_t m = bv.size();
        if (t.requires_grad(a)) {
            Tensor ga(av.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] / bv[i % m];
            t.accumulate(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb(av.shape());
            for (std::size_t i = 0; i < gb.size(); ++i) {
                const double d = bv[i % m];
                gb[i] = -g[i] * av[i] / (d * d);
            }
            t.accumulate(b, reduce_repeat(gb, bv.shape(), rep));
        }
    });
}

Var scalar_mul(Var a, double s) {
    Tensor out = map_unary(a.value(), [s](double x) { return s * x; });
    return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
        t.accumulate(a, map_unary(g, [s](double x) { return s * x; }));
    });
}

Var add_scalar(Var a, double s) {
    Tensor out = map_unary(a.value(), [s](double x) { return x + s; });
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var sigmoid(Var a) {
    Tensor out = map_unary(a.value(), sigmoid_value);
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        Tensor ga(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double s = sigmoid_value(x[i]);
            ga[i] = g[i] * s * (1.0 - s);
        }
        t.accumulate(a, ga);
    });
}

Var leaky_relu(Var a, double slope) {
    Tensor out = map_unary(a.value(), [slope](double x) { return x > 0.0 ? x : slope * x; });
    return a.tape().record(std::move(out), {a}, [a, slope](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        Tensor ga(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : slope * g[i];
        t.accumulate(a, ga);
    });
}

Var square(Var a) {
    Tensor out = map_unary(a.value(), [](double x) { return x * x; });
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        Tensor ga(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] = 2.0 * x[i] * g[i];
        t.accumulate(a, ga);
    });
}

Var sqrt_eps(Var a, double eps) {
    Tensor out = map_unary(a.value(), [eps](double x) { return std::sqrt(x + eps); });
    return a.tape().record(std::move(out), {a}, [a, eps](Tape& t, const Tensor& g) {
        const Tensor& x = a.value();
        Tensor ga(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] = 0.5 * g[i] / std::sqrt(x[i] + eps);
        t.accumulate(a, ga);
    });
}

Var sum(Var a) {
    Tensor out = Tensor::scalar(a.value().sum());
    return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        t.accumulate(a, Tensor(a.value().shape(), g[0]));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw std::invalid_argument("mean of empty tensor");
    Tensor out = Tensor::scalar(a.value().sum() / n);
    return a.tape().record(std::move(out), {a}, [a, n](Tape& t, const Tensor& g) {
        t.accumulate(a, Tensor(a.value().shape(), g[0] / n));
    });
}

Var conv3d(Var input, Var kernel, int stride, int padding) {
    const auto geo = kernels::ConvGeometry::make(input.shape(), kernel.shape(), stride, padding);
    Tensor out(Shape{geo.batch, geo.out_channels, geo.out_depth, geo.out_height, geo.out_width});
    kernels::conv3d_forward(geo, input.value().data(), kernel.value().data(), out.data());
    return input.tape().record(std::move(out), {input, kernel}, [input, kernel, geo](Tape& t, const Tensor& g) {
        if (t.requires_grad(input)) {
            Tensor gi(input.shape());
            kernels::conv3d_backward_input(geo, g.data(), kernel.value().data(), gi.data());
            t.accumulate(input, gi);
        }
        if (t.requires_grad(kernel)) {
            Tensor gk(kernel.shape());
            kernels::conv3d_backward_kernel(geo, input.value().data(), g.data(), gk.data());
            t.accumulate(kernel, gk);
        }
    });
}

Var add_channel_bias(Var input, Var bias) {
    const Tensor& x = input.value();
    const Tensor& b = bias.value();
    if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw std::invalid_argument("add_channel_bias: bias " + shape_string(b.shape()) + " does not match input " +
                                    shape_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
    Tensor out = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double* p = out.data().data() + (i * c + j) * inner;
            for (std::size_t k = 0; k < inner; ++k) p[k] += b[j];
        }
    return input.tape().record(std::move(out), {input, bias}, [input, bias, n, c, inner](Tape& t, const Tensor& g) {
        t.accumulate(input, g);
        if (t.requires_grad(bias)) {
            Tensor gb(Shape{c}, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const double* p = g.data().data() + (i * c + j) * inner;
                    double s = 0.0;
                    for (std::size_t k = 0; k < inner; ++k) s += p[k];
                    gb[j] += s;
                }
            t.accumulate(bias, gb);
        }
    });
}

Var upsample_trilinear(Var input, int factor) {
    if (factor != 2) throw std::invalid_argument("upsample_trilinear supports factor 2 only");
    const auto vs = kernels::VolumeShape::of(input.shape());
    Tensor out(Shape{vs.batch, vs.channels, 2 * vs.depth, 2 * vs.height, 2 * vs.width});
    kernels::upsample2_forward(vs, input.value().data(), out.data());
    return input.tape().record(std::move(out), {input}, [input, vs](Tape& t, const Tensor& g) {
        Tensor gi(input.shape());
        kernels::upsample2_backward(vs, g.data(), gi.data());
        t.accumulate(input, gi);
    });
}

Var grid_sample_trilinear(Var image, Var displacement) {
    const auto vs = kernels::VolumeShape::of(image.shape());
    const Shape& ds = displacement.shape();
    if (ds.size() != 5 || ds[0] != vs.batch || ds[1] != 3 || ds[2] != vs.depth || ds[3] != vs.height ||
        ds[4] != vs.width)
        throw std::invalid_argument("grid_sample: displacement " + shape_string(ds) + " does not match image " +
                                    shape_string(image.shape()));
    Tensor out(image.shape());
    kernels::grid_sample_forward(vs, image.value().data(), displacement.value().data(), out.data());
    return image.tape().record(std::move(out), {image, displacement},
                               [image, displacement, vs](Tape& t, const Tensor& g) {
                                   Tensor gi(image.shape());
                                   Tensor gd(displacement.shape());
                                   kernels::grid_sample_backward(vs, image.value().data(),
                                                                 displacement.value().data(), g.data(), gi.data(),
                                                                 gd.data());
                                   t.accumulate(image, gi);
                                   t.accumulate(displacement, gd);
                               });
}

Var concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels of nothing");
    const Shape& s0 = parts[0].shape();
    if (s0.size() < 2) throw std::invalid_argument("concat_channels needs [N,C,...] tensors");
    std::size_t channels = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size() || s[0] != s0[0] || !std::equal(s.begin() + 2, s.end(), s0.begin() + 2))
            throw std::invalid_argument("concat_channels: shape " + shape_string(s) + " incompatible with " +
                                        shape_string(s0));
        channels += s[1];
    }
    const std::size_t n = s0[0];
    const std::size_t inner = parts[0].value().size() / (n * s0[1]);
    Shape out_shape = s0;
    out_shape[1] = channels;
    Tensor out(out_shape);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const std::size_t c = p.shape()[1];
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(p.value().data().data() + i * c * inner, c * inner,
                        out.data().data() + (i * channels + offset) * inner);
        offset += c;
    }
    return parts[0].tape().record(std::move(out), parts, [parts, n, channels, inner](Tape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (const Var& p : parts) {
            const std::size_t c = p.shape()[1];
            if (t.requires_grad(p)) {
                Tensor gp(p.shape());
                for (std::size_t i = 0; i < n; ++i)
                    std::copy_n(g.data().data() + (i * channels + offset) * inner, c * inner,
                                gp.data().data() + i * c * inner);
                t.accumulate(p, gp);
            }
            offset += c;
        }
    });
}

Var slice_channels(Var input, std::size_t begin, std::size_t count) {
    const Shape& s = input.shape();
    if (s.size() < 2 || begin + count > s[1] || count == 0)
        throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") outside " + shape_string(s));
    const std::size_t n = s[0], c = s[1], inner = input.value().size() / (n * c);
    Shape os = s;
    os[1] = count;
    Tensor out(os);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(input.value().data().data() + (i * c + begin) * inner, count * inner,
                    out.data().data() + i * count * inner);
    return input.tape().record(std::move(out), {input}, [input, begin, count, n, c, inner](Tape& t, const Tensor& g) {
        Tensor& gi = t.grad_buffer(input);
        for (std::size_t i = 0; i < n; ++i) {
            const double* src = g.data().data() + i * count * inner;
            double* dst = gi.data().data() + (i * c + begin) * inner;
            for (std::size_t k = 0; k < count * inner; ++k) dst[k] += src[k];
        }
    });
}

Var crop_spatial(Var input, std::size_t depth, std::size_t height, std::size_t width) {
    const auto vs = kernels::VolumeShape::of(input.shape());
    if (depth > vs.depth || height > vs.height || width > vs.width || depth == 0 || height == 0 || width == 0)
        throw std::invalid_argument("crop_spatial: cannot crop " + shape_string(input.shape()) + " to " +
                                    std::to_string(depth) + "x" + std::to_string(height) + "x" +
                                    std::to_string(width));
    Tensor out(Shape{vs.batch, vs.channels, depth, height, width});
    const std::size_t nc = vs.batch * vs.channels;
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t z = 0; z < depth; ++z)
            for (std::size_t y = 0; y < height; ++y)
                std::copy_n(input.value().data().data() + ((i * vs.depth + z) * vs.height + y) * vs.width, width,
                            out.data().data() + ((i * depth + z) * height + y) * width);
    return input.tape().record(std::move(out), {input}, [input, vs, depth, height, width](Tape& t, const Tensor& g) {
        Tensor& gi = t.grad_buffer(input);
        const std::size_t nc = vs.batch * vs.channels;
        for (std::size_t i = 0; i < nc; ++i)
            for (std::size_t z = 0; z < depth; ++z)
                for (std::size_t y = 0; y < height; ++y) {
                    const double* src = g.data().data() + ((i * depth + z) * height + y) * width;
                    double* dst = gi.data().data() + ((i * vs.depth + z) * vs.height + y) * vs.width;
                    for (std::size_t x = 0; x < width; ++x) dst[x] += src[x];
                }
    });
}

Var forward_diff(Var input, int axis) {
    const auto vs = kernels::VolumeShape::of(input.shape());
    if (axis < 0 || axis > 2) throw std::invalid_argument("forward_diff axis must be 0, 1 or 2");
    const std::size_t dims[3] = {vs.depth, vs.height, vs.width};
    if (dims[axis] < 2) throw std::invalid_argument("forward_diff needs extent >= 2 along the axis");
    std::size_t od[3] = {vs.depth, vs.height, vs.width};
    od[axis] -= 1;
    const std::size_t step = axis == 0 ? vs.height * vs.width : axis == 1 ? vs.width : 1;
    Tensor out(Shape{vs.batch, vs.channels, od[0], od[1], od[2]});
    const std::size_t nc = vs.batch * vs.channels;
    const double* src = input.value().data().data();
    std::size_t o = 0;
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t z = 0; z < od[0]; ++z)
            for (std::size_t y = 0; y < od[1]; ++y)
                for (std::size_t x = 0; x < od[2]; ++x, ++o) {
                    const std::size_t j = ((i * vs.depth + z) * vs.height + y) * vs.width + x;
                    out[o] = src[j + step] - src[j];
                }
    return input.tape().record(std::move(out), {input}, [input, vs, od0 = od[0], od1 = od[1], od2 = od[2],
                                                         step](Tape& t, const Tensor& g) {
        Tensor& gi = t.grad_buffer(input);
        const std::size_t nc = vs.batch * vs.channels;
        std::size_t o = 0;
        for (std::size_t i = 0; i < nc; ++i)
            for (std::size_t z = 0; z < od0; ++z)
                for (std::size_t y = 0; y < od1; ++y)
                    for (std::size_t x = 0; x < od2; ++x, ++o) {
                        const std::size_t j = ((i * vs.depth + z) * vs.height + y) * vs.width + x;
                        gi[j + step] += g[o];
                        gi[j] -= g[o];
                    }
    });
}

Var box_sum(Var input, std::size_t window) {
    const auto vs = kernels::VolumeShape::of(input.shape());
    Tensor out(input.shape());
    kernels::box_sum(vs, input.value().data(), out.data(), window);
    return input.tape().record(std::move(out), {input}, [input, vs, window](Tape& t, const Tensor& g) {
        Tensor gi(input.shape());
        kernels::box_sum(vs, g.data(), gi.data(), window);
        t.accumulate(input, gi);
    });
}

}  // namespace steerreg::ad
