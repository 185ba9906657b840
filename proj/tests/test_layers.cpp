#include "steerreg/layers.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <numbers>

using namespace steerreg;
using namespace steerreg::layers;
using steerreg::testing::random_tensor;

namespace {

double rel_diff(const ad::Tensor& a, const ad::Tensor& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

FieldType mixed() { return FieldType::from_multiplicities({2, 1, 1}); }

ad::Tensor conv_value(const SteerableConvLayer& layer, const ad::Tensor& x, const ad::Tensor& w) {
    ad::Tape tape;
    const FeatureField in{tape.constant(x), layer.in_type()};
    return layer.apply(in, tape.constant(w)).tensor.value();
}

}  // namespace

TEST_CASE("channel budgeting reproduces the configuration table") {
    CHECK(budget_field_type(16, {5, 2, 1}) == FieldType::from_multiplicities({5, 2, 1}));
    CHECK(budget_field_type(16, {4, 4, 0}) == FieldType::from_multiplicities({4, 4, 0}));
    CHECK(budget_field_type(15, {0, 1, 0}) == FieldType::from_multiplicities({0, 5, 0}));
    CHECK(budget_field_type(8, {1, 1, 0}) == FieldType::from_multiplicities({2, 2, 0}));
    CHECK(budget_field_type(16, {16, 0, 0}).total_channels() == 16);
    CHECK(budget_field_type(16, {0, 0, 1}).total_channels() == 15);
    CHECK(budget_field_type(16, {7, 3, 0}).total_channels() == 16);
    CHECK_THROWS(budget_field_type(2, {0, 1, 0}));
    CHECK_THROWS(budget_field_type(16, {0, 0, 0}));

    for (int total = 1; total <= 40; ++total)
        for (const Ratio& r : std::vector<Ratio>{{1, 0, 0}, {1, 1, 0}, {5, 2, 1}, {0, 1, 1}, {2, 2, 2}, {0, 0, 1}}) {
            FieldType t;
            try {
                t = budget_field_type(total, r);
            } catch (const std::exception&) {
                continue;
            }
            CHECK(t.total_channels() <= total);
            CHECK(budget_field_type(t.total_channels(), r) == t);
        }

    CHECK(parse_ratio("5:2:1") == Ratio{5, 2, 1});
    CHECK(parse_ratio("1:1") == Ratio{1, 1, 0});
    CHECK(ratio_string({5, 2, 1}) == "5:2:1");
    CHECK_THROWS(parse_ratio("5:x"));
}

TEST_CASE("rotate_field") {
    Rng rng(1);
    const FieldType t = mixed();
    const ad::Tensor f = random_tensor({1, static_cast<std::size_t>(t.total_channels()), 5, 5, 5}, rng);
    const ad::Tensor same = rotate_field(f, t, so3::Rotation::identity());
    CHECK(std::equal(same.data().begin(), same.data().end(), f.data().begin()));

    const FieldType vec = FieldType::from_multiplicities({1, 2});
    const ad::Tensor g = random_tensor({2, 7, 4, 4, 4}, rng);
    for (const auto& r : so3::octahedral_rotations()) {
        // l <= 1 channels are signed permutations: exact round trip.
        const ad::Tensor back = rotate_field(rotate_field(g, vec, r), vec, r.inverse());
        CHECK(std::equal(back.data().begin(), back.data().end(), g.data().begin()));
        CHECK(rel_diff(rotate_field(rotate_field(f, t, r), t, r.inverse()), f) <= 1e-14);
    }

    // Scalars: a pure index permutation out(p) = in(R^T p) about the center.
    const ad::Tensor s = random_tensor({1, 1, 5, 5, 5}, rng);
    for (const auto& r : so3::octahedral_rotations()) {
        const ad::Tensor out = rotate_field(s, FieldType::scalars(1), r);
        const Eigen::Matrix3d m = r.matrix();
        for (int z = 0; z < 5; ++z)
            for (int y = 0; y < 5; ++y)
                for (int x = 0; x < 5; ++x) {
                    const Eigen::Vector3d q = m.transpose() * Eigen::Vector3d(x - 2, y - 2, z - 2);
                    const auto idx = [](double c) { return static_cast<std::size_t>(std::lround(c + 2)); };
                    CHECK(out.at({0, 0, std::size_t(z), std::size_t(y), std::size_t(x)}) ==
                          s.at({0, 0, idx(q.z()), idx(q.y()), idx(q.x())}));
                }
    }

    CHECK_THROWS(rotate_field(f, t, so3::Rotation::from_axis_angle({0, 0, 1}, 0.3)));
    CHECK_THROWS(rotate_field(f, FieldType::scalars(3), so3::Rotation::identity()));
}

TEST_CASE("steerable convolution") {
    Rng rng(2);
    SUBCASE("scalar layer is an isotropic convolution") {
        const SteerableConvLayer layer(FieldType::scalars(1), FieldType::scalars(1), 1);
        CHECK(layer.parameter_count() == 2);
        const ad::Tensor w = layer.init_weights(rng);
        const ad::Tensor k = layer.expand(w);
        std::map<int, double> orbit;
        for (int z = 0; z < 3; ++z)
            for (int y = 0; y < 3; ++y)
                for (int x = 0; x < 3; ++x) {
                    const int r2 = (z - 1) * (z - 1) + (y - 1) * (y - 1) + (x - 1) * (x - 1);
                    const double v = k.at({0, 0, std::size_t(z), std::size_t(y), std::size_t(x)});
                    if (orbit.count(r2)) CHECK(v == doctest::Approx(orbit[r2]).epsilon(1e-14));
                    orbit[r2] = v;
                }
        ad::Tape tape;
        const ad::Tensor x = random_tensor({1, 1, 5, 5, 5}, rng);
        const ad::Tensor a = conv_value(layer, x, w);
        const ad::Tensor b = ad::conv3d(tape.constant(x), tape.constant(k), 1, 1).value();
        CHECK(rel_diff(a, b) == 0.0);
    }
    SUBCASE("zero weights give zero output") {
        const SteerableConvLayer layer(mixed(), mixed(), 1);
        const ad::Tensor x = random_tensor({1, 10, 5, 5, 5}, rng);
        const ad::Tensor out = conv_value(layer, x, ad::Tensor(ad::Shape{layer.parameter_count()}, 0.0));
        for (double v : out.data()) CHECK(v == 0.0);
    }
    SUBCASE("equivariance for every irrep pair") {
        const FieldType in = FieldType::from_multiplicities({1, 1, 1}), out = FieldType::from_multiplicities({2, 1, 1});
        const SteerableConvLayer layer(in, out, 1);
        const ad::Tensor w = layer.init_weights(rng);
        const ad::Tensor x = random_tensor({1, 9, 7, 7, 7}, rng);
        const ad::Tensor y = conv_value(layer, x, w);
        double worst = 0.0;
        for (const auto& r : so3::octahedral_rotations())
            worst = std::max(worst, rel_diff(conv_value(layer, rotate_field(x, in, r), w), rotate_field(y, out, r)));
        CHECK(worst <= 1e-6);
    }
    SUBCASE("type mismatch names both types") {
        const SteerableConvLayer layer(mixed(), mixed(), 1);
        ad::Tape tape;
        const FieldType wrong = FieldType::scalars(10);
        const FeatureField f{tape.constant(ad::Tensor(ad::Shape{1, 10, 3, 3, 3})), wrong};
        try {
            layer.apply(f, tape.constant(ad::Tensor(ad::Shape{layer.parameter_count()})));
            FAIL("no exception");
        } catch (const std::invalid_argument& e) {
            const std::string what = e.what();
            CHECK(what.find(mixed().to_string()) != std::string::npos);
            CHECK(what.find(wrong.to_string()) != std::string::npos);
        }
    }
}

TEST_CASE("gated activation") {
    const FieldType t = FieldType::from_multiplicities({2, 1, 1});  // 2 scalars, 2 gated slots
    ad::Tape tape;
    ad::Tensor main(ad::Shape{1, 10, 1, 1, 1});
    for (std::size_t i = 0; i < 10; ++i) main[i] = i % 2 ? -2.0 : 3.0;
    const ad::Var m = tape.constant(main);
    const ad::Tensor zero = ad::Tensor(ad::Shape{1, 2, 1, 1, 1}, 0.0);
    const ad::Tensor low = ad::Tensor(ad::Shape{1, 2, 1, 1, 1}, -50.0);

    const ad::Tensor half = gated_activation(m, t, tape.constant(zero)).value();
    CHECK(half[0] == 3.0);
    CHECK(half[1] == doctest::Approx(-0.2));
    for (std::size_t i = 2; i < 10; ++i) CHECK(half[i] == doctest::Approx(main[i] * 0.5));

    const ad::Tensor off = gated_activation(m, t, tape.constant(low)).value();
    for (std::size_t i = 2; i < 10; ++i) CHECK(std::abs(off[i]) < 1e-20);

    // Rotate-then-gate equals gate-then-rotate.
    Rng rng(3);
    const ad::Tensor x = random_tensor({1, 10, 5, 5, 5}, rng, -2, 2);
    const ad::Tensor g = random_tensor({1, 2, 5, 5, 5}, rng, -2, 2);
    const ad::Tensor y = gated_activation(tape.constant(x), t, tape.constant(g)).value();
    for (const auto& r : so3::octahedral_rotations()) {
        const ad::Tensor a = gated_activation(tape.constant(rotate_field(x, t, r)), t,
                                              tape.constant(rotate_field(g, FieldType::scalars(2), r)))
                                 .value();
        CHECK(rel_diff(a, rotate_field(y, t, r)) <= 1e-6);
    }
}

TEST_CASE("gated blocks and encoders") {
    const GatedBlock block(mixed(), FieldType::from_multiplicities({1, 2, 1}), 1);
    REQUIRE(block.gate().has_value());
    CHECK(block.gate()->out_type() == FieldType::scalars(3));
    CHECK(block.gate()->out_type().is_scalar_only());
    const GatedBlock scalar(FieldType::scalars(2), FieldType::scalars(4), 1);
    CHECK_FALSE(scalar.gate().has_value());

    const EncoderSpec vm = make_encoder_spec(2, {8, 16, 16, 16}, {1, 2, 2, 2}, {1, 1, 0}, {5, 2, 1});
    CHECK(vm.levels.size() == 4);
    CHECK(vm.levels[0].type == FieldType::from_multiplicities({2, 2}));
    for (std::size_t i = 1; i < 4; ++i) CHECK(vm.levels[i].type == FieldType::from_multiplicities({5, 2, 1}));
    const EquivariantEncoder eq(vm);
    const StandardEncoder st(2, {8, 16, 16, 16}, {1, 2, 2, 2});
    CHECK(parameter_count(eq) < parameter_count(st));
    CHECK(parameter_count(EquivariantEncoder(EncoderSpec{FieldType::scalars(2), {}})) == 0);

    CHECK_THROWS(make_encoder_spec(2, {8, 16}, {1, 2, 2}, {1, 1, 0}, {5, 2, 1}));
    CHECK_THROWS(make_encoder_spec(2, {2, 16}, {1, 2}, {0, 1, 0}, {5, 2, 1}));

    SUBCASE("stack equivariance with odd extents") {
        const EncoderSpec spec = make_encoder_spec(2, {4, 9, 9}, {1, 2, 2}, {1, 1, 0}, {1, 1, 1});
        EquivariantEncoder enc(spec);
        optim::ParameterSet params;
        Rng rng(4);
        enc.register_parameters(params, "enc", rng);
        Rng data(5);
        const ad::Tensor x = random_tensor({1, 2, 9, 9, 9}, data);
        auto run = [&](const ad::Tensor& input) {
            ad::Tape tape;
            std::vector<ad::Var> vars;
            for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.constant(params[i]));
            std::vector<ad::Tensor> out;
            for (const auto& f : enc.forward(FeatureField{tape.constant(input), spec.input}, vars))
                out.push_back(f.tensor.value());
            return out;
        };
        const auto base = run(x);
        CHECK(base.back().dim(2) == 3);
        double worst = 0.0;
        for (const auto& r : so3::octahedral_rotations()) {
            const auto rotated = run(rotate_field(x, spec.input, r));
            for (std::size_t lv = 0; lv < base.size(); ++lv)
                worst = std::max(worst, rel_diff(rotated[lv], rotate_field(base[lv], spec.levels[lv].type, r)));
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("octahedral matrices") {
    for (const auto& r : so3::octahedral_rotations()) {
        const Eigen::Matrix3i m = octahedral_matrix(r);
        CHECK((m.cast<double>() - r.matrix()).norm() < 1e-12);
    }
    CHECK_THROWS(octahedral_matrix(so3::Rotation::from_axis_angle({1, 0, 0}, 0.1)));
}
