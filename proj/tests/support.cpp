#include "support.hpp"

#include "steerreg/layers.hpp"
#include "steerreg/registration.hpp"
#include "steerreg/so3.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace steerreg::testing {

ad::Tensor random_tensor(const ad::Shape& shape, Rng& rng, double lo, double hi) {
    ad::Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

namespace {

double evaluate(const std::vector<ad::Tensor>& inputs, const GraphFn& f, const ad::Tensor* weights) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    const ad::Var out = f(vars);
    if (!weights) return out.value().item();
    double s = 0.0;
    for (std::size_t i = 0; i < out.value().size(); ++i) s += out.value()[i] * (*weights)[i];
    return s;
}

}  // namespace

double gradient_check(const std::vector<ad::Tensor>& inputs, const GraphFn& f, Rng& rng, int coords, double h) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    ad::Var out = f(vars);
    std::optional<ad::Tensor> weights;
    if (out.value().size() != 1 || out.value().rank() != 0) {
        weights = random_tensor(out.shape(), rng);
        out = ad::sum(ad::mul(out, tape.constant(*weights)));
    }
    tape.backward(out);
    std::size_t total = 0;
    for (const auto& t : inputs) total += t.size();
    double worst = 0.0;
    for (int k = 0; k < coords; ++k) {
        std::size_t flat = rng.below(total), which = 0;
        while (flat >= inputs[which].size()) flat -= inputs[which++].size();
        const double analytic = tape.grad(vars[which])[flat];
        std::vector<ad::Tensor> plus = inputs, minus = inputs;
        plus[which][flat] += h;
        minus[which][flat] -= h;
        const ad::Tensor* w = weights ? &*weights : nullptr;
        const double numeric = (evaluate(plus, f, w) - evaluate(minus, f, w)) / (2 * h);
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic - numeric) / scale);
    }
    return worst;
}

namespace {

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Values with |x| >= 0.1 so a +-1e-4 step never crosses a kink at 0.
ad::Tensor away_from_zero(const ad::Shape& s, Rng& rng) {
    ad::Tensor t = random_tensor(s, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < t.size(); ++i)
        if (rng.below(2)) t[i] = -t[i];
    return t;
}

// Displacements whose sample points stay 0.1 away from grid planes.
ad::Tensor displacement(const ad::Shape& s, Rng& rng, double amplitude) {
    ad::Tensor t(s);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double whole = std::floor(rng.uniform(-amplitude, amplitude));
        t[i] = whole + rng.uniform(0.1, 0.9);
    }
    return t;
}

}  // namespace

std::vector<GradCheck> gradient_suite(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCheck> out;
    auto check = [&](const std::string& name, const std::vector<ad::Tensor>& inputs, const GraphFn& f) {
        out.push_back({name, gradient_check(inputs, f, rng)});
    };
    const ad::Shape s{dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 4)};
    const ad::Shape no_batch(s.begin() + 1, s.end());
    auto r = [&](const ad::Shape& sh) { return random_tensor(sh, rng); };

    check("add", {r(s), r(s)}, [](auto& v) { return ad::add(v[0], v[1]); });
    check("sub", {r(s), r(s)}, [](auto& v) { return ad::sub(v[0], v[1]); });
    check("mul", {r(s), r(s)}, [](auto& v) { return ad::mul(v[0], v[1]); });
    check("div", {r(s), random_tensor(s, rng, 0.5, 2.0)}, [](auto& v) { return ad::div(v[0], v[1]); });
    check("add broadcast", {r(s), r(no_batch)}, [](auto& v) { return ad::add(v[0], v[1]); });
    check("mul broadcast", {r(s), r(no_batch)}, [](auto& v) { return ad::mul(v[0], v[1]); });
    check("scalar_mul", {r(s)}, [](auto& v) { return ad::scalar_mul(v[0], -1.7); });
    check("add_scalar", {r(s)}, [](auto& v) { return ad::add_scalar(v[0], 0.3); });
    check("sigmoid", {random_tensor(s, rng, -4, 4)}, [](auto& v) { return ad::sigmoid(v[0]); });
    check("leaky_relu", {away_from_zero(s, rng)}, [](auto& v) { return ad::leaky_relu(v[0], 0.2); });
    check("square", {r(s)}, [](auto& v) { return ad::square(v[0]); });
    check("sqrt_eps", {random_tensor(s, rng, 0.1, 2.0)}, [](auto& v) { return ad::sqrt_eps(v[0], 1e-5); });
    check("sum", {r(s)}, [](auto& v) { return ad::sum(v[0]); });
    check("mean", {r(s)}, [](auto& v) { return ad::mean(v[0]); });

    for (int stride : {1, 2}) {
        const std::size_t cin = dim(rng, 1, 3), cout = dim(rng, 1, 3);
        const ad::Shape in{dim(rng, 1, 2), cin, dim(rng, 3, 5), dim(rng, 3, 5), dim(rng, 3, 5)};
        check("conv3d stride " + std::to_string(stride), {r(in), r({cout, cin, 3, 3, 3})},
              [stride](auto& v) { return ad::conv3d(v[0], v[1], stride, 1); });
    }
    check("conv3d no padding", {r({1, 2, 4, 5, 4}), r({2, 2, 3, 3, 3})},
          [](auto& v) { return ad::conv3d(v[0], v[1], 1, 0); });
    check("add_channel_bias", {r(s), r({s[1]})}, [](auto& v) { return ad::add_channel_bias(v[0], v[1]); });
    check("upsample_trilinear", {r(s)}, [](auto& v) { return ad::upsample_trilinear(v[0], 2); });
    {
        const ad::Shape disp{s[0], 3, s[2], s[3], s[4]};
        check("grid_sample_trilinear", {r(s), displacement(disp, rng, 1.5)},
              [](auto& v) { return ad::grid_sample_trilinear(v[0], v[1]); });
    }
    check("concat_channels", {r(s), r({s[0], 2, s[2], s[3], s[4]})},
          [](auto& v) { return ad::concat_channels({v[0], v[1]}); });
    check("slice_channels", {r({s[0], 4, s[2], s[3], s[4]})}, [](auto& v) { return ad::slice_channels(v[0], 1, 2); });
    check("crop_spatial", {r(s)}, [&](auto& v) { return ad::crop_spatial(v[0], s[2] - 1, s[3], s[4] - 1); });
    for (int axis = 0; axis < 3; ++axis)
        check("forward_diff axis " + std::to_string(axis), {r(s)},
              [axis](auto& v) { return ad::forward_diff(v[0], axis); });
    check("box_sum", {r(s)}, [](auto& v) { return ad::box_sum(v[0], 3); });

    // Composite graphs.
    check("ncc_loss", {random_tensor({1, 1, 6, 6, 6}, rng, 0, 1), random_tensor({1, 1, 6, 6, 6}, rng, 0, 1)},
          [](auto& v) { return reg::ncc_loss(v[0], v[1], 3, 1e-5); });
    check("smoothness_loss", {r({1, 3, 4, 5, 3})}, [](auto& v) { return reg::smoothness_loss(v[0]); });
    {
        const so3::FieldType in = so3::FieldType::from_multiplicities({1, 1});
        const so3::FieldType mid = so3::FieldType::from_multiplicities({1, 1, 1});
        const layers::SteerableConvLayer conv(in, mid, 1);
        check("steerable expand", {r({conv.parameter_count()})}, [&](auto& v) { return conv.expand(v[0]); });
        layers::GatedBlock registered(in, mid, 2);
        optim::ParameterSet params;
        Rng init(seed + 1);
        registered.register_parameters(params, "b", init);
        std::vector<ad::Tensor> inputs{r({1, 4, 5, 5, 5})};
        for (std::size_t i = 0; i < params.size(); ++i) inputs.push_back(params[i]);
        check("gated block", inputs, [&](auto& v) {
            const std::vector<ad::Var> p(v.begin() + 1, v.end());
            return registered.forward({v[0], in}, p).tensor;
        });
        check("gated_activation", {away_from_zero({1, 9, 3, 3, 3}, rng), random_tensor({1, 2, 3, 3, 3}, rng, -3, 3)},
              [&](auto& v) { return layers::gated_activation(v[0], mid, v[1]); });
    }
    {
        // Random parameters of a tiny registration model through the full loss.
        reg::ModelConfig mc;
        mc.variant = reg::Variant::equivariant;
        mc.channels = {4, 9};
        mc.strides = {1, 2};
        mc.deep_ratio = {1, 1, 1};
        mc.decoder_channels = 4;
        mc.seed = seed;
        reg::RegistrationModel model(mc);
        Rng data(seed + 2);
        ImageVolume fixed(Extent{7, 7, 7}, 0.0), moving(Extent{7, 7, 7}, 0.0);
        for (auto& x : fixed.data) x = data.uniform();
        for (auto& x : moving.data) x = data.uniform();
        // Lift the head off its near-zero init so the warp path contributes.
        for (auto& x : model.params()[*model.params().find("head/weight")].data()) x = data.normal(0.0, 0.05);
        std::vector<ad::Tensor> inputs;
        for (std::size_t i = 0; i < model.params().size(); ++i) inputs.push_back(model.params()[i]);
        check("registration loss", inputs, [&](auto& v) {
            return reg::total_loss(model, v, moving, fixed, reg::LossConfig{1.0, 3, 1e-5}).total;
        });
    }
    return out;
}

RepresentationErrors representation_suite(int rotations, std::uint64_t seed) {
    RepresentationErrors e;
    Rng rng(seed);
    for (int k = 0; k < rotations; ++k) {
        const so3::Rotation a = so3::random_rotation(rng.next_u64());
        const so3::Rotation b = so3::random_rotation(rng.next_u64());
        Eigen::Vector3d u(rng.normal(), rng.normal(), rng.normal());
        u.normalize();
        for (int l = 0; l <= 2; ++l) {
            const Eigen::MatrixXd da = so3::wigner_d_real(l, a), db = so3::wigner_d_real(l, b);
            const Eigen::MatrixXd dab = so3::wigner_d_real(l, a * b);
            const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1);
            e.homomorphism = std::max(e.homomorphism, (dab - da * db).cwiseAbs().maxCoeff());
            e.orthogonality = std::max(e.orthogonality, (da.transpose() * da - id).cwiseAbs().maxCoeff());
            const Eigen::VectorXd lhs = so3::real_spherical_harmonics(l, a.apply(u));
            const Eigen::VectorXd rhs = da * so3::real_spherical_harmonics(l, u);
            e.steerability = std::max(e.steerability, (lhs - rhs).cwiseAbs().maxCoeff());
        }
    }
    return e;
}

double dice_oracle(const LabelVolume& a, const LabelVolume& b, int label) {
    long na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i] == label;
        nb += b.data[i] == label;
        both += a.data[i] == label && b.data[i] == label;
    }
    return na + nb == 0 ? std::numeric_limits<double>::quiet_NaN() : 2.0 * both / static_cast<double>(na + nb);
}

namespace {

std::vector<std::array<double, 3>> surface(const LabelVolume& v, int label, const std::array<double, 3>& spacing) {
    const Extent e = v.extent;
    std::vector<std::array<double, 3>> out;
    auto label_at = [&](long z, long y, long x) {
        const bool inside = z >= 0 && y >= 0 && x >= 0 && z < long(e.depth) && y < long(e.height) && x < long(e.width);
        return inside ? v.at(z, y, x) : -1;
    };
    const long offsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (long z = 0; z < long(e.depth); ++z)
        for (long y = 0; y < long(e.height); ++y)
            for (long x = 0; x < long(e.width); ++x) {
                if (label_at(z, y, x) != label) continue;
                bool boundary = false;
                for (const auto& o : offsets) boundary = boundary || label_at(z + o[0], y + o[1], x + o[2]) != label;
                if (boundary) out.push_back({z * spacing[0], y * spacing[1], x * spacing[2]});
            }
    return out;
}

}  // namespace

double assd_oracle(const LabelVolume& a, const LabelVolume& b, int label, const std::array<double, 3>& spacing) {
    const auto sa = surface(a, label, spacing), sb = surface(b, label, spacing);
    auto nearest = [](const std::array<double, 3>& p, const std::vector<std::array<double, 3>>& set) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : set) {
            const double d = std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                       (p[2] - q[2]) * (p[2] - q[2]));
            best = std::min(best, d);
        }
        return best;
    };
    double total = 0.0;
    for (const auto& p : sa) total += nearest(p, sb);
    for (const auto& p : sb) total += nearest(p, sa);
    return total / static_cast<double>(sa.size() + sb.size());
}

WilcoxonOracle wilcoxon_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    const std::size_t n = d.size();
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        double below = 0, equal = 0;
        for (std::size_t j = 0; j < n; ++j) {
            below += std::abs(d[j]) < std::abs(d[i]);
            equal += std::abs(d[j]) == std::abs(d[i]);
        }
        rank[i] = below + (equal + 1) / 2.0;
    }
    WilcoxonOracle o;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) o.w_plus += rank[i];
    double ge = 0, le = 0;
    const double patterns = std::pow(2.0, static_cast<double>(n));
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        double w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1) w += rank[i];
        ge += w >= o.w_plus;
        le += w <= o.w_plus;
    }
    o.p_greater = ge / patterns;
    o.p_less = le / patterns;
    o.p_two_sided = std::min(1.0, 2.0 * std::min(o.p_greater, o.p_less));
    return o;
}

LabelVolume random_labels(Extent e, int labels, Rng& rng) {
    LabelVolume v(e, 0);
    for (int k = 0; k < 2 * labels; ++k) {
        const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(labels)));
        const std::size_t z0 = rng.below(e.depth), y0 = rng.below(e.height), x0 = rng.below(e.width);
        const std::size_t z1 = std::min(e.depth, z0 + 1 + rng.below(e.depth / 2 + 1));
        const std::size_t y1 = std::min(e.height, y0 + 1 + rng.below(e.height / 2 + 1));
        const std::size_t x1 = std::min(e.width, x0 + 1 + rng.below(e.width / 2 + 1));
        for (std::size_t z = z0; z < z1; ++z)
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) v.at(z, y, x) = label;
    }
    return v;
}

}  // namespace steerreg::testing
