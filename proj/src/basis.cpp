#include "steerreg/basis.hpp"

#include "steerreg/binary_io.hpp"
#include "steerreg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>

namespace steerreg::basis {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::uint64_t kConstraintSeed = 0x5eed'0003;
constexpr int kConstraintRotations = 4;
constexpr double kNullThreshold = 1e-8;

double factorial(int n) {
    double f = 1.0;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
}

void check_order(int l, int max, const char* what) {
    if (l < 0 || l > max) throw std::invalid_argument(std::string("unsupported ") + what + " order " + std::to_string(l));
}

// Fixed directions on which filter Wigner matrices are fitted.
struct HarmonicFit {
    Eigen::MatrixXd points;  // 3 x N
    Eigen::MatrixXd pinv;    // N x (2l+1)
};

const HarmonicFit& harmonic_fit(int l) {
    static const std::vector<HarmonicFit> fits = [] {
        std::vector<HarmonicFit> out;
        constexpr int kPoints = 40;
        for (int order = 0; order <= kMaxFilterOrder; ++order) {
            Rng rng(0x5eed'0004 + order);
            HarmonicFit f;
            f.points.resize(3, kPoints);
            Eigen::MatrixXd y(2 * order + 1, kPoints);
            for (int s = 0; s < kPoints; ++s) {
                Eigen::Vector3d u(rng.normal(), rng.normal(), rng.normal());
                u.normalize();
                f.points.col(s) = u;
                y.col(s) = filter_harmonics(order, u);
            }
            f.pinv = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(y).pseudoInverse();
            out.push_back(std::move(f));
        }
        return out;
    }();
    return fits[l];
}

Eigen::MatrixXd kron3(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& c) {
    const Eigen::Index n = a.rows() * b.rows() * c.rows();
    Eigen::MatrixXd out(n, n);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            for (Eigen::Index k = 0; k < b.rows(); ++k)
                for (Eigen::Index m = 0; m < b.cols(); ++m)
                    out.block((i * b.rows() + k) * c.rows(), (j * b.cols() + m) * c.cols(), c.rows(), c.cols()) =
                        a(i, j) * b(k, m) * c;
    return out;
}

// Grid offsets for index i along an axis of extent size.
double offset_of(int i, int size) { return i - 0.5 * (size - 1); }

}  // namespace

RadialProfileSet RadialProfileSet::for_extent(int size) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("kernel extent must be odd");
    RadialProfileSet r;
    const int half = (size - 1) / 2;
    for (int j = 0; j <= half; ++j) r.ring_centers.push_back(j);
    r.ring_width = 0.6;
    r.cutoff = half * std::sqrt(3.0);
    return r;
}

void RadialProfileSet::validate() const {
    if (ring_centers.empty() || ring_centers.front() != 0.0)
        throw std::invalid_argument("ring centers must start at 0");
    for (std::size_t j = 1; j < ring_centers.size(); ++j)
        if (!(ring_centers[j] > ring_centers[j - 1]))
            throw std::invalid_argument("ring centers must be strictly increasing");
    if (!(ring_width > 0.0)) throw std::invalid_argument("ring width must be positive");
    if (cutoff < ring_centers.back()) throw std::invalid_argument("cutoff below the largest ring center");
}

double RadialProfileSet::evaluate(std::size_t ring, double r) const {
    if (r > cutoff + 1e-12) return 0.0;
    const double d = r - ring_centers.at(ring);
    return std::exp(-d * d / (2.0 * ring_width * ring_width));
}

Eigen::VectorXd filter_harmonics(int l, const Eigen::Vector3d& u) {
    check_order(l, kMaxFilterOrder, "filter");
    if (std::abs(u.norm() - 1.0) > 1e-9) throw std::invalid_argument("input not on sphere");
    const double x = u.x(), y = u.y(), z = u.z();
    Eigen::VectorXd out(2 * l + 1);
    for (int m = 0; m <= l; ++m) {
        // P_l^m(z) / (1 - z^2)^{m/2}, a polynomial, by upward recursion in l.
        double pmm = 1.0;
        for (int k = 1; k <= m; ++k) pmm *= 2.0 * k - 1.0;
        double p = pmm;
        if (l > m) {
            double prev = pmm;
            double cur = z * (2.0 * m + 1.0) * pmm;
            for (int k = m + 2; k <= l; ++k) {
                const double next = ((2.0 * k - 1.0) * z * cur - (k + m - 1.0) * prev) / (k - m);
                prev = cur;
                cur = next;
            }
            p = cur;
        }
        // Re and Im of (x + i y)^m.
        double re = 1.0, im = 0.0;
        for (int k = 0; k < m; ++k) {
            const double nr = re * x - im * y;
            im = re * y + im * x;
            re = nr;
        }
        const double k = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi) * factorial(l - m) / factorial(l + m));
        if (m == 0) {
            out(l) = k * p;
        } else {
            out(l + m) = std::sqrt(2.0) * k * p * re;
            out(l - m) = std::sqrt(2.0) * k * p * im;
        }
    }
    return out;
}

Eigen::MatrixXd filter_wigner(int l, const so3::Rotation& r) {
    check_order(l, kMaxFilterOrder, "filter");
    const HarmonicFit& fit = harmonic_fit(l);
    const Eigen::Matrix3d m = r.matrix();
    Eigen::MatrixXd rotated(2 * l + 1, fit.points.cols());
    for (Eigen::Index s = 0; s < fit.points.cols(); ++s) {
        Eigen::Vector3d u = m * fit.points.col(s);
        u.normalize();
        rotated.col(s) = filter_harmonics(l, u);
    }
    return rotated * fit.pinv;
}

std::vector<AngularSolution> solve_angular_basis(int l_in, int l_out) {
    check_order(l_in, so3::kMaxOrder, "irrep");
    check_order(l_out, so3::kMaxOrder, "irrep");
    std::vector<so3::Rotation> rotations;
    for (int k = 0; k < kConstraintRotations; ++k) rotations.push_back(so3::random_rotation(kConstraintSeed + k));

    std::vector<AngularSolution> out;
    for (int lf = std::abs(l_in - l_out); lf <= l_in + l_out; ++lf) {
        const int n = (2 * l_out + 1) * (2 * l_in + 1) * (2 * lf + 1);
        Eigen::MatrixXd system(n * kConstraintRotations, n);
        for (int k = 0; k < kConstraintRotations; ++k) {
            const so3::Rotation& r = rotations[k];
            const Eigen::MatrixXd d_out = so3::wigner_d_real(l_out, r);
            const Eigen::MatrixXd d_in = so3::wigner_d_real(l_in, r);
            const Eigen::MatrixXd d_f = filter_wigner(lf, r);
            // k(Rx) = D_out k(x) D_in^T, written on the coefficient tensor c[o][i][m].
            system.block(k * n, 0, n, n) =
                kron3(d_out, d_in, Eigen::MatrixXd::Identity(2 * lf + 1, 2 * lf + 1)) -
                kron3(Eigen::MatrixXd::Identity(2 * l_out + 1, 2 * l_out + 1),
                      Eigen::MatrixXd::Identity(2 * l_in + 1, 2 * l_in + 1), d_f.transpose());
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(system, Eigen::ComputeFullV);
        const Eigen::VectorXd& s = svd.singularValues();
        int nullity = 0;
        for (Eigen::Index i = 0; i < s.size(); ++i)
            if (s(i) < kNullThreshold * std::max(s(0), 1.0)) ++nullity;
        if (nullity != 1) throw std::runtime_error("basis solver convention mismatch");
        Eigen::VectorXd v = svd.matrixV().col(n - 1);
        v.normalize();
        Eigen::Index pivot = 0;
        const double vmax = v.cwiseAbs().maxCoeff();
        while (std::abs(v(pivot)) < 0.999 * vmax) ++pivot;
        if (v(pivot) < 0) v = -v;
        AngularSolution sol;
        sol.l_filter = lf;
        sol.l_in = l_in;
        sol.l_out = l_out;
        sol.coeff.assign(v.data(), v.data() + n);
        out.push_back(std::move(sol));
    }
    return out;
}

KernelBasis sample_kernel_basis(int l_in, int l_out, int size, const RadialProfileSet& radial) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("kernel extent must be odd");
    radial.validate();
    const auto solutions = solve_angular_basis(l_in, l_out);
    const int d_out = 2 * l_out + 1, d_in = 2 * l_in + 1;
    const std::size_t vox = static_cast<std::size_t>(size) * size * size;
    const std::size_t elem = d_out * d_in * vox;

    KernelBasis kb;
    kb.l_in = l_in;
    kb.l_out = l_out;
    kb.size = size;
    std::vector<std::vector<double>> elements;
    for (std::size_t j = 0; j < radial.ring_centers.size(); ++j) {
        for (const auto& sol : solutions) {
            if (radial.ring_centers[j] == 0.0 && sol.l_filter != 0) continue;
            std::vector<double> e(elem, 0.0);
            for (int z = 0; z < size; ++z)
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const Eigen::Vector3d p(offset_of(x, size), offset_of(y, size), offset_of(z, size));
                        const double r = p.norm();
                        const double g = radial.evaluate(j, r);
                        if (g == 0.0) continue;
                        Eigen::VectorXd yf;
                        if (r == 0.0) {
                            if (sol.l_filter != 0) continue;
                            yf = filter_harmonics(0, Eigen::Vector3d::UnitZ());
                        } else {
                            yf = filter_harmonics(sol.l_filter, p / r);
                        }
                        const std::size_t v = (static_cast<std::size_t>(z) * size + y) * size + x;
                        for (int o = 0; o < d_out; ++o)
                            for (int i = 0; i < d_in; ++i) {
                                double acc = 0.0;
                                for (int m = 0; m < yf.size(); ++m) acc += sol.at(o, i, m) * yf(m);
                                e[(static_cast<std::size_t>(o) * d_in + i) * vox + v] = g * acc;
                            }
                    }
            double norm = 0.0;
            for (double t : e) norm += t * t;
            norm = std::sqrt(norm);
            if (norm < 1e-12) continue;  // ring does not reach any grid point
            for (double& t : e) t /= norm;
            elements.push_back(std::move(e));
            kb.l_filter.push_back(sol.l_filter);
            kb.ring.push_back(static_cast<int>(j));
        }
    }
    const std::size_t b = elements.size();
    kb.basis = ad::Tensor(ad::Shape{b, static_cast<std::size_t>(d_out), static_cast<std::size_t>(d_in),
                                    static_cast<std::size_t>(size), static_cast<std::size_t>(size),
                                    static_cast<std::size_t>(size)});
    for (std::size_t k = 0; k < b; ++k) std::copy(elements[k].begin(), elements[k].end(), kb.basis.data().begin() + k * elem);
    if (b > 0 && basis_condition_ratio(kb) <= 1e-6)
        throw std::runtime_error("kernel basis elements are linearly dependent for (" + std::to_string(l_in) + ", " +
                                 std::to_string(l_out) + ") at extent " + std::to_string(size));
    return kb;
}

std::shared_ptr<const KernelBasis> cached_kernel_basis(int l_in, int l_out, int size) {
    static std::mutex mutex;
    static std::map<std::tuple<int, int, int>, std::shared_ptr<const KernelBasis>> cache;
    const auto key = std::make_tuple(l_in, l_out, size);
    {
        std::lock_guard lock(mutex);
        if (auto it = cache.find(key); it != cache.end()) return it->second;
    }
    auto kb = std::make_shared<const KernelBasis>(
        sample_kernel_basis(l_in, l_out, size, RadialProfileSet::for_extent(size)));
    std::lock_guard lock(mutex);
    return cache.emplace(key, std::move(kb)).first->second;
}

int basis_count(int l_in, int l_out, int size) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("kernel extent must be odd");
    check_order(l_in, so3::kMaxOrder, "irrep");
    check_order(l_out, so3::kMaxOrder, "irrep");
    const int rings = (size - 1) / 2;  // excluding the ring at 0
    const int filters = 2 * std::min(l_in, l_out) + 1;
    return filters * rings + (l_in == l_out ? 1 : 0);
}

double basis_equivariance_residual(const KernelBasis& kb, const so3::Rotation& r) {
    const int size = kb.size;
    const int d_out = 2 * kb.l_out + 1, d_in = 2 * kb.l_in + 1;
    const std::size_t vox = static_cast<std::size_t>(size) * size * size;
    const Eigen::MatrixXd dout = so3::wigner_d_real(kb.l_out, r);
    const Eigen::MatrixXd din = so3::wigner_d_real(kb.l_in, r);
    const Eigen::Matrix3d m = r.matrix();
    const bool grid_exact = so3::is_octahedral(r);
    const double c = 0.5 * (size - 1);

    // Value of channel (o, i) of element b at continuous index position q = (x, y, z).
    auto sample = [&](std::size_t b, int o, int i, const Eigen::Vector3d& q) {
        const double* e = kb.element(b) + (static_cast<std::size_t>(o) * d_in + i) * vox;
        auto at = [&](int x, int y, int z) {
            if (x < 0 || y < 0 || z < 0 || x >= size || y >= size || z >= size) return 0.0;
            return e[(static_cast<std::size_t>(z) * size + y) * size + x];
        };
        if (grid_exact) return at(static_cast<int>(std::lround(q.x())), static_cast<int>(std::lround(q.y())),
                                  static_cast<int>(std::lround(q.z())));
        const int x0 = static_cast<int>(std::floor(q.x())), y0 = static_cast<int>(std::floor(q.y())),
                  z0 = static_cast<int>(std::floor(q.z()));
        const double fx = q.x() - x0, fy = q.y() - y0, fz = q.z() - z0;
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    acc += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) * at(x0 + dx, y0 + dy, z0 + dz);
        return acc;
    };

    double worst = 0.0;
    for (std::size_t b = 0; b < kb.count(); ++b) {
        const double* e = kb.element(b);
        double diff2 = 0.0, norm2 = 0.0;
        Eigen::MatrixXd k(d_out, d_in), rk(d_out, d_in);
        for (int z = 0; z < size; ++z)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const std::size_t v = (static_cast<std::size_t>(z) * size + y) * size + x;
                    for (int o = 0; o < d_out; ++o)
                        for (int i = 0; i < d_in; ++i) k(o, i) = e[(static_cast<std::size_t>(o) * d_in + i) * vox + v];
                    const Eigen::Vector3d p(x - c, y - c, z - c);
                    const Eigen::Vector3d q = m * p + Eigen::Vector3d::Constant(c);
                    for (int o = 0; o < d_out; ++o)
                        for (int i = 0; i < d_in; ++i) rk(o, i) = sample(b, o, i, q);
                    diff2 += (dout * k * din.transpose() - rk).squaredNorm();
                    norm2 += k.squaredNorm();
                }
        if (norm2 > 0) worst = std::max(worst, std::sqrt(diff2 / norm2));
    }
    return worst;
}

double basis_condition_ratio(const KernelBasis& kb) {
    const std::size_t b = kb.count();
    if (b == 0) return 0.0;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        kb.basis.data().data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(kb.element_size()));
    const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
    return s(s.size() - 1) / s(0);
}

void save_basis(const std::filesystem::path& path, const KernelBasis& kb) {
    io::ByteWriter w;
    w.magic("STBK");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(kb.l_in));
    w.u32(static_cast<std::uint32_t>(kb.l_out));
    w.u32(static_cast<std::uint32_t>(kb.size));
    w.u32(static_cast<std::uint32_t>(kb.count()));
    w.f64s(kb.basis.data());
    io::write_file_atomic(path, w.data());
}

KernelBasis load_basis(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path), path.string());
    if (!r.expect_magic("STBK")) throw std::runtime_error("not a STBK file: " + path.string());
    if (const auto v = r.u32(); v != 1) throw std::runtime_error("unsupported STBK version " + std::to_string(v));
    KernelBasis kb;
    kb.l_in = static_cast<int>(r.u32());
    kb.l_out = static_cast<int>(r.u32());
    kb.size = static_cast<int>(r.u32());
    const std::size_t b = r.u32();
    if (kb.l_in > so3::kMaxOrder || kb.l_out > so3::kMaxOrder || kb.size % 2 == 0)
        throw std::runtime_error("invalid STBK header in " + path.string());
    const auto k = static_cast<std::size_t>(kb.size);
    kb.basis = ad::Tensor(ad::Shape{b, static_cast<std::size_t>(2 * kb.l_out + 1),
                                    static_cast<std::size_t>(2 * kb.l_in + 1), k, k, k});
    if (r.remaining() != kb.basis.size() * 8)
        throw std::runtime_error("STBK payload length disagrees with header in " + path.string());
    r.f64s(kb.basis.data());
    return kb;
}

}  // namespace steerreg::basis
