#pragma once

// Equivariant convolution kernel bases between two irreps.
//
// A kernel k(x) mapping an order-l_in field to an order-l_out field is
// equivariant when k(Rx) = D_out(R) k(x) D_in(R)^T. Solutions factor into a
// radial profile times an angular part sum_m c[o][i][m] Y^{l_f}_m(x/|x|).

#include "steerreg/so3.hpp"
#include "steerreg/tensor.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <vector>

namespace steerreg::basis {

/// Highest filter order reachable from l_in, l_out <= 2.
inline constexpr int kMaxFilterOrder = 4;

/// Gaussian rings exp(-(r - c)^2 / (2 w^2)), zero beyond the cutoff.
struct RadialProfileSet {
    std::vector<double> ring_centers;
    double ring_width = 0.6;
    double cutoff = 0.0;

    /// Rings at 0..(size-1)/2, width 0.6, cutoff at the grid corner.
    static RadialProfileSet for_extent(int size);
    void validate() const;
    double evaluate(std::size_t ring, double r) const;

    friend bool operator==(const RadialProfileSet&, const RadialProfileSet&) = default;
};

struct AngularSolution {
    int l_filter = 0;
    int l_in = 0, l_out = 0;
    /// Row-major [2 l_out + 1][2 l_in + 1][2 l_filter + 1].
    std::vector<double> coeff;

    double at(int o, int i, int m) const {
        return coeff[(static_cast<std::size_t>(o) * (2 * l_in + 1) + i) * (2 * l_filter + 1) + m];
    }
};

/// Real harmonics up to order 4 used for kernel angular parts, m = -l..l,
/// orthonormal over the sphere, no Condon-Shortley phase.
Eigen::VectorXd filter_harmonics(int l, const Eigen::Vector3d& u);
/// Matrix with filter_harmonics(l, R u) = filter_wigner(l, R) filter_harmonics(l, u).
Eigen::MatrixXd filter_wigner(int l, const so3::Rotation& r);

/// One solution per l_f in [|l_in - l_out|, l_in + l_out].
std::vector<AngularSolution> solve_angular_basis(int l_in, int l_out);

struct KernelBasis {
    int l_in = 0, l_out = 0, size = 1;
    /// [B, 2 l_out + 1, 2 l_in + 1, K, K, K], each element of unit norm.
    ad::Tensor basis;
    /// Filter order and ring of each element (empty after load_basis).
    std::vector<int> l_filter;
    std::vector<int> ring;

    std::size_t count() const { return basis.empty() ? 0 : basis.dim(0); }
    std::size_t element_size() const { return basis.size() / count(); }
    const double* element(std::size_t b) const { return basis.data().data() + b * element_size(); }
};

/// Samples every (angular solution, ring) pair on a size^3 grid. The ring
/// centred at 0 only carries l_f = 0.
KernelBasis sample_kernel_basis(int l_in, int l_out, int size, const RadialProfileSet& radial);

/// Process-wide cache over sample_kernel_basis with default rings.
std::shared_ptr<const KernelBasis> cached_kernel_basis(int l_in, int l_out, int size);

/// Number of basis elements for default rings, without sampling.
int basis_count(int l_in, int l_out, int size);

/// max_b |D_out k_b(x) D_in^T - k_b(Rx)| / |k_b|. Octahedral rotations
/// permute the grid; others resample k_b trilinearly (zero outside).
double basis_equivariance_residual(const KernelBasis& kb, const so3::Rotation& r);

/// Smallest over largest singular value of the element matrix.
double basis_condition_ratio(const KernelBasis& kb);

void save_basis(const std::filesystem::path& path, const KernelBasis& kb);
KernelBasis load_basis(const std::filesystem::path& path);

}  // namespace steerreg::basis
