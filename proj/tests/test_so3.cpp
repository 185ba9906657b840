#include "steerreg/so3.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

using namespace steerreg;
using so3::Rotation;

namespace {

// Rodrigues: v cos t + (k x v) sin t + k (k.v)(1 - cos t).
Eigen::Vector3d rodrigues(const Eigen::Vector3d& axis, double angle, const Eigen::Vector3d& v) {
    const Eigen::Vector3d k = axis.normalized();
    return v * std::cos(angle) + k.cross(v) * std::sin(angle) + k * k.dot(v) * (1 - std::cos(angle));
}

std::array<int, 9> rounded(const Eigen::Matrix3d& m) {
    std::array<int, 9> out{};
    for (int i = 0; i < 9; ++i) out[i] = static_cast<int>(std::lround(m(i / 3, i % 3)));
    return out;
}

}  // namespace

TEST_CASE("axis-angle rotations") {
    CHECK(Rotation::from_axis_angle({0, 0, 1}, 0).matrix().isApprox(Eigen::Matrix3d::Identity(), 1e-15));
    const Eigen::Vector3d e = Rotation::from_axis_angle({0, 0, 1}, std::numbers::pi / 2).apply({1, 0, 0});
    CHECK((e - Eigen::Vector3d(0, 1, 0)).norm() < 1e-15);

    const Eigen::Vector3d diag = Eigen::Vector3d(1, 1, 1) / std::sqrt(3.0);
    const Rotation cyc = Rotation::from_axis_angle(diag, 2 * std::numbers::pi / 3);
    for (int i = 0; i < 3; ++i) {
        const Eigen::Vector3d v = Eigen::Vector3d::Unit(i);
        CHECK((cyc.apply(v) - rodrigues(diag, 2 * std::numbers::pi / 3, v)).norm() < 1e-12);
        CHECK((cyc.apply(v) - Eigen::Vector3d::Unit((i + 1) % 3)).norm() < 1e-12);
    }

    steerreg::Rng rng(3);
    for (int k = 0; k < 50; ++k) {
        const Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
        const double angle = rng.uniform(-4, 4);
        const Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
        CHECK((Rotation::from_axis_angle(axis, angle).apply(v) - rodrigues(axis, angle, v)).norm() < 1e-12);
    }
    CHECK_THROWS_WITH(Rotation::from_axis_angle({0, 0, 0}, 1.0), "degenerate axis");
}

TEST_CASE("composition applies the right operand first") {
    const Rotation a = so3::random_rotation(1), b = so3::random_rotation(2);
    const Eigen::Vector3d v(0.3, -0.2, 0.9);
    CHECK(((a * b).apply(v) - a.apply(b.apply(v))).norm() < 1e-12);
    CHECK(((a * a.inverse()).matrix() - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(Rotation::from_matrix(a.matrix()).matrix().isApprox(a.matrix(), 1e-12));
}

TEST_CASE("random rotations") {
    CHECK(so3::random_rotation(42).quaternion() == so3::random_rotation(42).quaternion());
    double trace = 0.0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
        const Eigen::Matrix3d m = so3::random_rotation(1000 + k).matrix();
        if (k < 100) CHECK(m.determinant() == doctest::Approx(1.0).epsilon(1e-12));
        trace += m.trace();
    }
    CHECK(std::abs(trace / n) < 0.02);
}

TEST_CASE("octahedral group") {
    const auto& g = so3::octahedral_rotations();
    REQUIRE(g.size() == 24);
    CHECK(g.front().matrix().isApprox(Eigen::Matrix3d::Identity()));
    std::set<std::array<int, 9>> elements;
    for (const auto& r : g) {
        const Eigen::Matrix3d m = r.matrix();
        for (int i = 0; i < 9; ++i) {
            const double v = m(i / 3, i % 3);
            CHECK((std::abs(v) < 1e-12 || std::abs(std::abs(v) - 1) < 1e-12));
        }
        CHECK(so3::is_octahedral(r));
        elements.insert(rounded(m));
    }
    CHECK(elements.size() == 24);
    for (const auto& a : g)
        for (const auto& b : g) CHECK(elements.count(rounded((a * b).matrix())) == 1);
    CHECK_FALSE(so3::is_octahedral(so3::random_rotation(5)));
}

TEST_CASE("real spherical harmonics") {
    const Eigen::Vector3d u = Eigen::Vector3d(0.2, -0.5, 0.7).normalized();
    CHECK(so3::real_spherical_harmonics(0, u)(0) == doctest::Approx(0.5 / std::sqrt(std::numbers::pi)));
    const Eigen::VectorXd y1 = so3::real_spherical_harmonics(1, {0, 0, 1});
    const double c1 = std::sqrt(3.0 / (4 * std::numbers::pi));
    CHECK(y1(1) == doctest::Approx(c1));
    CHECK(std::abs(y1(0)) == 0.0);
    CHECK(std::abs(y1(2)) == 0.0);
    CHECK((so3::real_spherical_harmonics(2, u) - so3::real_spherical_harmonics(2, -u)).norm() == 0.0);
    CHECK((so3::real_spherical_harmonics(1, u) + so3::real_spherical_harmonics(1, -u)).norm() < 1e-15);

    // Monte-Carlo orthonormality over the sphere.
    steerreg::Rng rng(11);
    const int n = 1000000;
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(9, 9);
    for (int k = 0; k < n; ++k) {
        Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
        v.normalize();
        Eigen::VectorXd y(9);
        y << so3::real_spherical_harmonics(0, v), so3::real_spherical_harmonics(1, v),
            so3::real_spherical_harmonics(2, v);
        gram += y * y.transpose();
    }
    gram *= 4 * std::numbers::pi / n;
    CHECK((gram - Eigen::MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff() < 0.01);
    CHECK_THROWS(so3::real_spherical_harmonics(3, u));
}

TEST_CASE("wigner matrices") {
    const Rotation r = so3::random_rotation(9);
    CHECK(so3::wigner_d_real(0, r)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(so3::wigner_d_real(2, Rotation::identity()).isApprox(Eigen::MatrixXd::Identity(5, 5), 1e-15));

    // l = 1 is R in (y, z, x) order; oracle through harmonic evaluation.
    Eigen::Matrix3d p;
    p << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    CHECK((so3::wigner_d_real(1, r) - p * r.matrix() * p.transpose()).norm() < 1e-12);
    steerreg::Rng rng(4);
    for (int k = 0; k < 3; ++k) {
        Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
        v.normalize();
        const Eigen::VectorXd lhs = so3::real_spherical_harmonics(1, r.apply(v));
        CHECK((lhs - so3::wigner_d_real(1, r) * so3::real_spherical_harmonics(1, v)).norm() < 1e-12);
    }

    const auto e = steerreg::testing::representation_suite(200, 8);
    CHECK(e.homomorphism < 1e-9);
    CHECK(e.orthogonality < 1e-9);
    CHECK(e.steerability < 1e-9);
}

TEST_CASE("field types and representation matrices") {
    using so3::FieldType;
    const FieldType t = FieldType::from_multiplicities({2, 1, 1});
    CHECK(t.total_channels() == 10);
    CHECK(t.nonscalar_slots() == 2);
    CHECK(t.slot_count() == 4);
    CHECK(t.slot_orders() == std::vector<int>{0, 0, 1, 2});
    CHECK(FieldType({{{1}, 1}, {{0}, 2}, {{1}, 0}}) == FieldType::from_multiplicities({2, 1}));

    const Rotation r = so3::random_rotation(17);
    CHECK(so3::rep_matrix(FieldType::scalars(4), r).isApprox(Eigen::MatrixXd::Identity(4, 4)));
    CHECK(so3::rep_matrix(FieldType::from_multiplicities({1, 1}), Rotation::identity())
              .isApprox(Eigen::MatrixXd::Identity(4, 4)));

    // Two stacked vectors: the block-diagonal matrix acts on each separately.
    const Eigen::MatrixXd rho = so3::rep_matrix(FieldType::from_multiplicities({0, 2}), r);
    REQUIRE(rho.rows() == 6);
    const Eigen::MatrixXd d1 = so3::wigner_d_real(1, r);
    Eigen::VectorXd v(6);
    v << 0.1, 0.2, 0.3, -0.4, 0.5, 0.6;
    const Eigen::VectorXd w = rho * v;
    CHECK((w.head(3) - d1 * v.head(3)).norm() < 1e-15);
    CHECK((w.tail(3) - d1 * v.tail(3)).norm() < 1e-15);
    CHECK(rho.block(0, 3, 3, 3).norm() == 0.0);
}
