#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace steerreg::so3 {

/// Highest irrep order supported by every layer in this library.
inline constexpr int kMaxOrder = 2;

/// Element of SO(3) stored as a unit quaternion (w, x, y, z).
///
/// Vectors are (x, y, z) in the right-handed frame whose axes map to the
/// W, H, D tensor axes respectively.
class Rotation {
public:
    Rotation() = default;

    static Rotation identity() { return Rotation{}; }
    /// Throws std::invalid_argument("degenerate axis") for a zero axis.
    static Rotation from_axis_angle(const Eigen::Vector3d& axis, double angle);
    static Rotation from_quaternion(double w, double x, double y, double z);
    /// Exact for signed permutation matrices; general orthogonal input is
    /// accepted within 1e-9.
    static Rotation from_matrix(const Eigen::Matrix3d& m);

    Eigen::Matrix3d matrix() const;
    Eigen::Vector3d apply(const Eigen::Vector3d& v) const { return matrix() * v; }
    Rotation inverse() const { return Rotation(w_, -x_, -y_, -z_); }

    /// this ∘ rhs: rhs is applied first.
    Rotation operator*(const Rotation& rhs) const;

    Eigen::Vector4d quaternion() const { return {w_, x_, y_, z_}; }

private:
    Rotation(double w, double x, double y, double z);

    double w_ = 1.0;
    double x_ = 0.0;
    double y_ = 0.0;
    double z_ = 0.0;
};

inline Rotation rotation_from_axis_angle(const Eigen::Vector3d& axis, double angle) {
    return Rotation::from_axis_angle(axis, angle);
}

/// Haar-uniform rotation, deterministic per seed.
Rotation random_rotation(std::uint64_t seed);

/// The 24 rotations that map a cubic voxel grid onto itself. Identity first.
const std::vector<Rotation>& octahedral_rotations();

/// True when the rotation matrix is a signed permutation (within 1e-9).
bool is_octahedral(const Rotation& r);

struct Irrep {
    int l = 0;
    constexpr int dim() const { return 2 * l + 1; }
    friend constexpr bool operator==(Irrep, Irrep) = default;
};

/// Ordered list of (irrep, multiplicity). Channels are laid out entry by
/// entry; each copy of an irrep occupies a contiguous block of 2l+1 channels.
class FieldType {
public:
    struct Entry {
        Irrep irrep;
        int multiplicity = 0;
        friend bool operator==(const Entry&, const Entry&) = default;
    };

    FieldType() = default;
    /// Merges duplicate orders, drops zero multiplicities, sorts by l.
    explicit FieldType(std::vector<Entry> entries);

    static FieldType scalars(int count);
    /// Multiplicities per order l = 0, 1, 2, ...
    static FieldType from_multiplicities(const std::vector<int>& per_order);

    const std::vector<Entry>& entries() const { return entries_; }
    int total_channels() const;
    int multiplicity(int l) const;
    /// Number of irrep copies ("slots") with l > 0.
    int nonscalar_slots() const;
    int slot_count() const;
    bool is_scalar_only() const;

    /// Irrep order of each slot in channel order.
    std::vector<int> slot_orders() const;

    std::string to_string() const;

    friend bool operator==(const FieldType&, const FieldType&) = default;

private:
    std::vector<Entry> entries_;
};

/// Real spherical harmonics of order l at unit vector u.
///
/// Components are ordered m = -l..l without the Condon-Shortley phase:
///   l=1: c1 * (y, z, x)
///   l=2: c2 * (xy, yz, (3z^2-1)/(2*sqrt3), xz, (x^2-y^2)/2)
/// with orthonormal normalization over the sphere.
Eigen::VectorXd real_spherical_harmonics(int l, const Eigen::Vector3d& u);

/// Real Wigner-D matrix in the basis of real_spherical_harmonics, so that
/// Y^l(R u) = D^l(R) Y^l(u).
Eigen::MatrixXd wigner_d_real(int l, const Rotation& r);

/// Block-diagonal representation matrix rho(R) for a field type.
Eigen::MatrixXd rep_matrix(const FieldType& type, const Rotation& r);

}  // namespace steerreg::so3
