#include "steerreg/so3.hpp"

#include "steerreg/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace steerreg::so3 {

namespace {

constexpr double kPi = std::numbers::pi;

// Real-harmonic component order for l = 1 is (y, z, x).
Eigen::Matrix3d l1_permutation() {
    Eigen::Matrix3d p = Eigen::Matrix3d::Zero();
    p(0, 1) = 1.0;
    p(1, 2) = 1.0;
    p(2, 0) = 1.0;
    return p;
}

// Least-squares intertwiner A (5x9) with Y2(u) = A vec(Y1(u) Y1(u)^T), and its
// pseudo-inverse. Fitted once on a fixed set of directions.
struct L2Intertwiner {
    Eigen::Matrix<double, 5, 9> a;
    Eigen::Matrix<double, 9, 5> a_pinv;
};

const L2Intertwiner& l2_intertwiner() {
    static const L2Intertwiner cached = [] {
        constexpr int kSamples = 64;
        Rng rng(0x5eed'0002);
        Eigen::MatrixXd design(kSamples, 9);
        Eigen::MatrixXd target(kSamples, 5);
        for (int s = 0; s < kSamples; ++s) {
            Eigen::Vector3d u(rng.normal(), rng.normal(), rng.normal());
            u.normalize();
            const Eigen::VectorXd y1 = real_spherical_harmonics(1, u);
            const Eigen::VectorXd y2 = real_spherical_harmonics(2, u);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) design(s, 3 * i + j) = y1(i) * y1(j);
            target.row(s) = y2.transpose();
        }
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
        const Eigen::MatrixXd at = cod.solve(target);  // 9x5
        L2Intertwiner out;
        out.a = at.transpose();
        out.a_pinv = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(out.a).pseudoInverse();
        return out;
    }();
    return cached;
}

}  // namespace

Rotation::Rotation(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    w_ = w / n;
    x_ = x / n;
    y_ = y / n;
    z_ = z / n;
}

Rotation Rotation::from_axis_angle(const Eigen::Vector3d& axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("degenerate axis");
    const Eigen::Vector3d a = axis / n;
    const double s = std::sin(0.5 * angle);
    return Rotation(std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s);
}

Rotation Rotation::from_quaternion(double w, double x, double y, double z) {
    if (!(w * w + x * x + y * y + z * z > 0.0)) throw std::invalid_argument("zero quaternion");
    return Rotation(w, x, y, z);
}

Rotation Rotation::from_matrix(const Eigen::Matrix3d& m) {
    const Eigen::Matrix3d gram = m * m.transpose() - Eigen::Matrix3d::Identity();
    if (gram.norm() > 1e-9 || std::abs(m.determinant() - 1.0) > 1e-9)
        throw std::invalid_argument("matrix is not a rotation");
    // Shepperd's method: pick the largest diagonal combination for stability.
    const double trace = m.trace();
    double w, x, y, z;
    if (trace > m(0, 0) && trace > m(1, 1) && trace > m(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + trace);
        w = 0.25 * s;
        x = (m(2, 1) - m(1, 2)) / s;
        y = (m(0, 2) - m(2, 0)) / s;
        z = (m(1, 0) - m(0, 1)) / s;
    } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2));
        w = (m(2, 1) - m(1, 2)) / s;
        x = 0.25 * s;
        y = (m(0, 1) + m(1, 0)) / s;
        z = (m(0, 2) + m(2, 0)) / s;
    } else if (m(1, 1) >= m(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2));
        w = (m(0, 2) - m(2, 0)) / s;
        x = (m(0, 1) + m(1, 0)) / s;
        y = 0.25 * s;
        z = (m(1, 2) + m(2, 1)) / s;
    } else {
        const double s = 2.0 * std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1));
        w = (m(1, 0) - m(0, 1)) / s;
        x = (m(0, 2) + m(2, 0)) / s;
        y = (m(1, 2) + m(2, 1)) / s;
        z = 0.25 * s;
    }
    return Rotation(w, x, y, z);
}

Eigen::Matrix3d Rotation::matrix() const {
    const double w = w_, x = x_, y = y_, z = z_;
    Eigen::Matrix3d m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
}

Rotation Rotation::operator*(const Rotation& r) const {
    return Rotation(w_ * r.w_ - x_ * r.x_ - y_ * r.y_ - z_ * r.z_,
                    w_ * r.x_ + x_ * r.w_ + y_ * r.z_ - z_ * r.y_,
                    w_ * r.y_ - x_ * r.z_ + y_ * r.w_ + z_ * r.x_,
                    w_ * r.z_ + x_ * r.y_ - y_ * r.x_ + z_ * r.w_);
}

Rotation random_rotation(std::uint64_t seed) {
    Rng rng(seed);
    double w, x, y, z, n2;
    do {
        w = rng.normal();
        x = rng.normal();
        y = rng.normal();
        z = rng.normal();
        n2 = w * w + x * x + y * y + z * z;
    } while (n2 < 1e-12);
    return Rotation::from_quaternion(w, x, y, z);
}

const std::vector<Rotation>& octahedral_rotations() {
    static const std::vector<Rotation> group = [] {
        std::vector<Rotation> out;
        std::array<int, 3> perm{0, 1, 2};
        do {
            for (int signs = 0; signs < 8; ++signs) {
                Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
                for (int row = 0; row < 3; ++row)
                    m(row, perm[row]) = (signs >> row) & 1 ? -1.0 : 1.0;
                if (m.determinant() > 0.0) out.push_back(Rotation::from_matrix(m));
            }
        } while (std::next_permutation(perm.begin(), perm.end()));
        return out;
    }();
    return group;
}

bool is_octahedral(const Rotation& r) {
    const Eigen::Matrix3d m = r.matrix();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double v = m(i, j);
            if (std::abs(v) > 1e-9 && std::abs(std::abs(v) - 1.0) > 1e-9) return false;
        }
    return true;
}

FieldType::FieldType(std::vector<Entry> entries) {
    std::map<int, int> merged;
    for (const auto& e : entries) {
        if (e.irrep.l < 0) throw std::invalid_argument("negative irrep order");
        if (e.multiplicity < 0) throw std::invalid_argument("negative multiplicity");
        if (e.multiplicity > 0) merged[e.irrep.l] += e.multiplicity;
    }
    for (const auto& [l, m] : merged) entries_.push_back({Irrep{l}, m});
}

FieldType FieldType::scalars(int count) { return FieldType({{Irrep{0}, count}}); }

FieldType FieldType::from_multiplicities(const std::vector<int>& per_order) {
    std::vector<Entry> entries;
    for (std::size_t l = 0; l < per_order.size(); ++l)
        entries.push_back({Irrep{static_cast<int>(l)}, per_order[l]});
    return FieldType(std::move(entries));
}

int FieldType::total_channels() const {
    int c = 0;
    for (const auto& e : entries_) c += e.multiplicity * e.irrep.dim();
    return c;
}

int FieldType::multiplicity(int l) const {
    for (const auto& e : entries_)
        if (e.irrep.l == l) return e.multiplicity;
    return 0;
}

int FieldType::nonscalar_slots() const {
    int n = 0;
    for (const auto& e : entries_)
        if (e.irrep.l > 0) n += e.multiplicity;
    return n;
}

int FieldType::slot_count() const {
    int n = 0;
    for (const auto& e : entries_) n += e.multiplicity;
    return n;
}

bool FieldType::is_scalar_only() const { return nonscalar_slots() == 0; }

std::vector<int> FieldType::slot_orders() const {
    std::vector<int> out;
    for (const auto& e : entries_)
        for (int k = 0; k < e.multiplicity; ++k) out.push_back(e.irrep.l);
    return out;
}

std::string FieldType::to_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (i) os << ", ";
        os << entries_[i].multiplicity << "x(l=" << entries_[i].irrep.l << ')';
    }
    os << ']';
    return os.str();
}

Eigen::VectorXd real_spherical_harmonics(int l, const Eigen::Vector3d& u) {
    if (l < 0 || l > kMaxOrder) throw std::invalid_argument("unsupported irrep order");
    if (std::abs(u.norm() - 1.0) > 1e-9) throw std::invalid_argument("input not on sphere");
    const double x = u.x(), y = u.y(), z = u.z();
    Eigen::VectorXd out(2 * l + 1);
    switch (l) {
        case 0:
            out(0) = 0.5 / std::sqrt(kPi);
            break;
        case 1: {
            const double c = std::sqrt(3.0 / (4.0 * kPi));
            out << c * y, c * z, c * x;
            break;
        }
        default: {
            const double c = 0.5 * std::sqrt(15.0 / kPi);
            out << c * x * y, c * y * z, 0.25 * std::sqrt(5.0 / kPi) * (3.0 * z * z - 1.0), c * x * z,
                0.5 * c * (x * x - y * y);
            break;
        }
    }
    return out;
}

Eigen::MatrixXd wigner_d_real(int l, const Rotation& r) {
    if (l < 0 || l > kMaxOrder) throw std::invalid_argument("unsupported irrep order");
    if (l == 0) return Eigen::MatrixXd::Identity(1, 1);
    const Eigen::Matrix3d p = l1_permutation();
    const Eigen::Matrix3d d1 = p * r.matrix() * p.transpose();
    if (l == 1) return d1;
    Eigen::Matrix<double, 9, 9> kron;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) kron.block<3, 3>(3 * i, 3 * j) = d1(i, j) * d1;
    const auto& tw = l2_intertwiner();
    return tw.a * kron * tw.a_pinv;
}

Eigen::MatrixXd rep_matrix(const FieldType& type, const Rotation& r) {
    const int c = type.total_channels();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c, c);
    int offset = 0;
    for (const auto& e : type.entries()) {
        const Eigen::MatrixXd block = wigner_d_real(e.irrep.l, r);
        const int d = e.irrep.dim();
        for (int k = 0; k < e.multiplicity; ++k) {
            out.block(offset, offset, d, d) = block;
            offset += d;
        }
    }
    return out;
}

}  // namespace steerreg::so3
