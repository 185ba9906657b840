#include "steerreg/metrics.hpp"

#include "steerreg/so3.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>

namespace steerreg::metrics {

DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& label_set) {
    if (!(a.extent == b.extent)) throw std::invalid_argument("dice: extent mismatch");
    std::set<int> labels(label_set.begin(), label_set.end());
    if (labels.empty()) {
        for (auto v : a.data)
            if (v != 0) labels.insert(v);
        for (auto v : b.data)
            if (v != 0) labels.insert(v);
    }
    std::map<int, std::size_t> ca, cb, both;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        ++ca[a.data[i]];
        ++cb[b.data[i]];
        if (a.data[i] == b.data[i]) ++both[a.data[i]];
    }
    DiceResult out;
    double sum = 0.0;
    for (int l : labels) {
        const std::size_t total = ca[l] + cb[l];
        if (total == 0) continue;
        const double d = 2.0 * static_cast<double>(both[l]) / static_cast<double>(total);
        out.per_label[l] = d;
        sum += d;
    }
    out.mean = out.per_label.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : sum / static_cast<double>(out.per_label.size());
    return out;
}

std::vector<Eigen::Vector3i> surface_voxels(const LabelVolume& v, int label) {
    const Extent e = v.extent;
    std::vector<Eigen::Vector3i> out;
    auto inside = [&](long z, long y, long x) {
        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(e.depth) || y >= static_cast<long>(e.height) ||
            x >= static_cast<long>(e.width))
            return false;
        return v.at(z, y, x) == label;
    };
    for (long z = 0; z < static_cast<long>(e.depth); ++z)
        for (long y = 0; y < static_cast<long>(e.height); ++y)
            for (long x = 0; x < static_cast<long>(e.width); ++x) {
                if (!inside(z, y, x)) continue;
                if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
                    !inside(z, y, x - 1) || !inside(z, y, x + 1))
                    out.emplace_back(static_cast<int>(z), static_cast<int>(y), static_cast<int>(x));
            }
    return out;
}

double assd(const LabelVolume& a, const LabelVolume& b, int label, const std::array<double, 3>& spacing) {
    if (!(a.extent == b.extent)) throw std::invalid_argument("assd: extent mismatch");
    const auto sa = surface_voxels(a, label);
    const auto sb = surface_voxels(b, label);
    if (sa.empty() || sb.empty()) throw std::invalid_argument("empty surface");
    const Eigen::Vector3d s(spacing[0], spacing[1], spacing[2]);
    auto directed = [&](const std::vector<Eigen::Vector3i>& from, const std::vector<Eigen::Vector3i>& to) {
        double total = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) best = std::min(best, (p - q).cast<double>().cwiseProduct(s).squaredNorm());
            total += std::sqrt(best);
        }
        return total;
    };
    return (directed(sa, sb) + directed(sb, sa)) / static_cast<double>(sa.size() + sb.size());
}

namespace {

struct RankedDiffs {
    std::vector<long> doubled_ranks;  // 2 x average rank
    std::vector<bool> positive;
    std::vector<std::size_t> tie_sizes;
};

RankedDiffs rank_differences(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: paired samples differ in length");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
    if (d.empty()) throw std::invalid_argument("degenerate pairing");
    if (d.size() < 5)
        throw std::invalid_argument("wilcoxon needs at least 5 non-zero differences, got " + std::to_string(d.size()));
    std::vector<std::size_t> order(d.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
    RankedDiffs r;
    r.doubled_ranks.resize(d.size());
    r.positive.resize(d.size());
    for (std::size_t i = 0; i < d.size();) {
        std::size_t j = i;
        while (j + 1 < d.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
        // Ranks i+1..j+1 averaged, doubled to stay integral.
        const long doubled = static_cast<long>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) r.doubled_ranks[order[k]] = doubled;
        r.tie_sizes.push_back(j - i + 1);
        i = j + 1;
    }
    for (std::size_t i = 0; i < d.size(); ++i) r.positive[i] = d[i] > 0;
    return r;
}

void fill_statistics(WilcoxonResult& out, const RankedDiffs& r) {
    long wp = 0, wm = 0;
    for (std::size_t i = 0; i < r.positive.size(); ++i) (r.positive[i] ? wp : wm) += r.doubled_ranks[i];
    out.w_plus = wp / 2.0;
    out.w_minus = wm / 2.0;
    out.statistic = std::min(out.w_plus, out.w_minus);
    out.n = r.positive.size();
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

WilcoxonResult wilcoxon_signed_rank_normal(const std::vector<double>& a, const std::vector<double>& b) {
    const RankedDiffs r = rank_differences(a, b);
    WilcoxonResult out;
    fill_statistics(out, r);
    out.exact = false;
    const double n = static_cast<double>(out.n);
    const double mean = n * (n + 1) / 4.0;
    double var = n * (n + 1) * (2 * n + 1) / 24.0;
    for (std::size_t t : r.tie_sizes) var -= (std::pow(static_cast<double>(t), 3) - static_cast<double>(t)) / 48.0;
    const double sd = std::sqrt(var);
    out.p_greater = 1.0 - normal_cdf((out.w_plus - mean - 0.5) / sd);
    out.p_less = normal_cdf((out.w_plus - mean + 0.5) / sd);
    out.p_greater = std::clamp(out.p_greater, 0.0, 1.0);
    out.p_less = std::clamp(out.p_less, 0.0, 1.0);
    out.p_two_sided = std::min(1.0, 2.0 * std::min(out.p_greater, out.p_less));
    return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    const RankedDiffs r = rank_differences(a, b);
    if (r.positive.size() > 12) return wilcoxon_signed_rank_normal(a, b);
    WilcoxonResult out;
    fill_statistics(out, r);
    const long observed = static_cast<long>(2.0 * out.w_plus);
    const std::size_t n = r.positive.size();
    const std::uint64_t patterns = std::uint64_t{1} << n;
    std::uint64_t ge = 0, le = 0;
    for (std::uint64_t mask = 0; mask < patterns; ++mask) {
        long w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1) w += r.doubled_ranks[i];
        if (w >= observed) ++ge;
        if (w <= observed) ++le;
    }
    out.p_greater = static_cast<double>(ge) / static_cast<double>(patterns);
    out.p_less = static_cast<double>(le) / static_cast<double>(patterns);
    out.p_two_sided = std::min(1.0, 2.0 * std::min(out.p_greater, out.p_less));
    out.exact = true;
    return out;
}

namespace {

Eigen::Matrix3d axis_rotation(double angle_deg, Axis axis) {
    const Eigen::Vector3d u = axis == Axis::x ? Eigen::Vector3d::UnitX()
                              : axis == Axis::y ? Eigen::Vector3d::UnitY()
                                                : Eigen::Vector3d::UnitZ();
    return so3::Rotation::from_axis_angle(u, angle_deg * std::numbers::pi / 180.0).matrix();
}

// Source position (x, y, z) of every output voxel.
template <class F>
void for_each_source(Extent e, double angle_deg, Axis axis, F&& f) {
    const Eigen::Matrix3d rinv = axis_rotation(angle_deg, axis).transpose();
    const Eigen::Vector3d c(0.5 * (e.width - 1.0), 0.5 * (e.height - 1.0), 0.5 * (e.depth - 1.0));
    for (std::size_t z = 0; z < e.depth; ++z)
        for (std::size_t y = 0; y < e.height; ++y)
            for (std::size_t x = 0; x < e.width; ++x) {
                const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
                f(e.index(z, y, x), rinv * (p - c) + c);
            }
}

}  // namespace

ImageVolume rotate_volume(const ImageVolume& image, double angle_deg, Axis axis) {
    if (angle_deg == 0.0) return image;
    const Extent e = image.extent;
    ImageVolume out(e, 0.0);
    out.spacing = image.spacing;
    auto at = [&](long z, long y, long x) {
        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(e.depth) || y >= static_cast<long>(e.height) ||
            x >= static_cast<long>(e.width))
            return 0.0;
        return image.at(z, y, x);
    };
    for_each_source(e, angle_deg, axis, [&](std::size_t v, const Eigen::Vector3d& q) {
        const long x0 = static_cast<long>(std::floor(q.x())), y0 = static_cast<long>(std::floor(q.y())),
                   z0 = static_cast<long>(std::floor(q.z()));
        const double fx = q.x() - x0, fy = q.y() - y0, fz = q.z() - z0;
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    if (w != 0.0) acc += w * at(z0 + dz, y0 + dy, x0 + dx);
                }
        out.data[v] = acc;
    });
    return out;
}

LabelVolume rotate_volume(const LabelVolume& labels, double angle_deg, Axis axis) {
    if (angle_deg == 0.0) return labels;
    const Extent e = labels.extent;
    LabelVolume out(e, 0);
    out.spacing = labels.spacing;
    for_each_source(e, angle_deg, axis, [&](std::size_t v, const Eigen::Vector3d& q) {
        const long x = std::lround(q.x()), y = std::lround(q.y()), z = std::lround(q.z());
        if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(e.depth) || y >= static_cast<long>(e.height) ||
            x >= static_cast<long>(e.width))
            return;
        out.data[v] = labels.at(z, y, x);
    });
    return out;
}

}  // namespace steerreg::metrics
