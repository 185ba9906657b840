#pragma once

#include "steerreg/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace steerreg::synth {

struct SyntheticSpec {
    int extent = 33;
    int n_blobs = 6;
    int n_labels = 7;
    double deform_amplitude = 3.0;
    double deform_smoothness = 4.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct VolumePair {
    ImageVolume fixed, moving;
    LabelVolume fixed_labels, moving_labels;
    std::optional<DisplacementField> gt_field;
};

/// fixed: soft ellipsoids + 2% noise in [0, 1]; moving(x) = fixed(x + u(x))
/// for a smoothed-noise field u whose largest vector has the given amplitude.
VolumePair generate_pair(const SyntheticSpec& spec);

/// Gaussian-filtered white noise scaled to a maximum vector norm.
DisplacementField smooth_random_field(Extent extent, double amplitude, double sigma, std::uint64_t seed);

/// v with v(x) = -u(x + v(x)), by fixed-point iteration.
DisplacementField invert_field(const DisplacementField& u, int iterations = 10);

// SVOL files. dtype 0 = f64 image, 1 = i32 labels, 2 = f64 3-vector field.
void save_volume(const std::filesystem::path& path, const ImageVolume& v);
void save_volume(const std::filesystem::path& path, const LabelVolume& v);
void save_volume(const std::filesystem::path& path, const DisplacementField& v);
ImageVolume load_image(const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
DisplacementField load_field(const std::filesystem::path& path);

/// Writes a pair directory with one SVOL per volume and manifest.json.
void save_pair(const std::filesystem::path& dir, const VolumePair& pair, const std::string& extra_json = "{}");
VolumePair load_pair(const std::filesystem::path& dir);

struct Split {
    std::vector<std::size_t> train, test;
};

/// Seeded permutation of 0..n_pairs-1; the first n_test go to test and the
/// train set is a prefix of the rest, so smaller fractions are nested in
/// larger ones. fraction must be 1, 1/2, 1/4 or 1/8.
Split dataset_split(std::size_t n_pairs, double fraction, std::uint64_t seed, std::size_t n_test = 0);

}  // namespace steerreg::synth
