#pragma once

#include "steerreg/volume.hpp"

#include <Eigen/Dense>

#include <map>
#include <vector>

namespace steerreg::metrics {

struct DiceResult {
    std::map<int, double> per_label;
    /// Mean over labels present in at least one volume (NaN if none).
    double mean = 0.0;
};

/// 2|A∩B| / (|A| + |B|) per label. An empty label_set means every nonzero
/// label found in either volume.
DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& label_set = {});

/// Voxels of the label with at least one 6-neighbour outside it (the volume
/// border counts as outside).
std::vector<Eigen::Vector3i> surface_voxels(const LabelVolume& v, int label);

/// Average symmetric surface distance in mm with exact nearest-surface
/// search. Throws "empty surface" when the label is missing from either.
double assd(const LabelVolume& a, const LabelVolume& b, int label, const std::array<double, 3>& spacing = {1, 1, 1});

struct WilcoxonResult {
    double w_plus = 0.0;
    double w_minus = 0.0;
    /// min(W+, W-)
    double statistic = 0.0;
    std::size_t n = 0;
    /// Two-sided, and one-sided for a > b and a < b.
    double p_two_sided = 1.0;
    double p_greater = 1.0;
    double p_less = 1.0;
    bool exact = true;
};

/// Paired signed-rank test on a - b. Zero differences are dropped; exact
/// enumeration for n <= 12, tie-corrected normal approximation otherwise.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

/// Normal-approximation variant, exposed for cross-checking the exact path.
WilcoxonResult wilcoxon_signed_rank_normal(const std::vector<double>& a, const std::vector<double>& b);

enum class Axis { x, y, z };

/// Rotation by angle_deg about the volume center around the given axis:
/// out(p) = in(R^-1 p), trilinear, zero outside.
ImageVolume rotate_volume(const ImageVolume& image, double angle_deg, Axis axis = Axis::z);
/// Nearest-neighbour variant for labels, background 0 outside.
LabelVolume rotate_volume(const LabelVolume& labels, double angle_deg, Axis axis = Axis::z);

}  // namespace steerreg::metrics
