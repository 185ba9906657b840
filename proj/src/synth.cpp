#include "steerreg/synth.hpp"

#include "steerreg/binary_io.hpp"
#include "steerreg/kernels.hpp"
#include "steerreg/rng.hpp"
#include "steerreg/so3.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace steerreg {

namespace {

kernels::VolumeShape shape_of(Extent e, std::size_t channels) {
    return {1, channels, e.depth, e.height, e.width};
}

}  // namespace

ImageVolume warp_image(const ImageVolume& image, const DisplacementField& field) {
    if (!(image.extent == field.extent)) throw std::invalid_argument("warp_image: extent mismatch");
    ImageVolume out = image;
    kernels::grid_sample_forward(shape_of(image.extent, 1), image.data, field.data, out.data);
    return out;
}

LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& field) {
    if (!(labels.extent == field.extent)) throw std::invalid_argument("warp_labels: extent mismatch");
    const Extent e = labels.extent;
    LabelVolume out = labels;
    auto clamp_round = [](double v, std::size_t n) {
        const double r = std::nearbyint(std::clamp(v, 0.0, static_cast<double>(n - 1)));
        return static_cast<std::size_t>(r);
    };
    for (std::size_t z = 0; z < e.depth; ++z)
        for (std::size_t y = 0; y < e.height; ++y)
            for (std::size_t x = 0; x < e.width; ++x) {
                const std::size_t v = e.index(z, y, x);
                const std::size_t sz = clamp_round(z + field.component(0, v), e.depth);
                const std::size_t sy = clamp_round(y + field.component(1, v), e.height);
                const std::size_t sx = clamp_round(x + field.component(2, v), e.width);
                out.data[v] = labels.at(sz, sy, sx);
            }
    return out;
}

namespace synth {

namespace {

constexpr double kBackground = 0.05;
constexpr double kNoise = 0.02;
constexpr int kPlacementAttempts = 2000;

struct Blob {
    Eigen::Vector3d center;  // (x, y, z) voxel coordinates
    Eigen::Vector3d radii;
    Eigen::Matrix3d axes;  // rows are the local axes
    double amplitude;
};

std::vector<double> gaussian_taps(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> taps(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) total += taps[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& t : taps) t /= total;
    return taps;
}

// Separable Gaussian filter with clamped borders, in place on one channel.
void gaussian_filter(std::vector<double>& data, std::size_t offset, Extent e, double sigma) {
    const std::vector<double> taps = gaussian_taps(sigma);
    const int radius = static_cast<int>(taps.size() / 2);
    const std::size_t dims[3] = {e.depth, e.height, e.width};
    const std::size_t strides[3] = {e.height * e.width, e.width, 1};
    std::vector<double> line, out;
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t n = dims[axis], stride = strides[axis];
        line.resize(n);
        out.resize(n);
        for (std::size_t base = 0; base < e.voxels(); ++base) {
            if ((base / stride) % n != 0) continue;  // base must be the first element of a line
            for (std::size_t i = 0; i < n; ++i) line[i] = data[offset + base + i * stride];
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const long j = std::clamp<long>(static_cast<long>(i) + k, 0, static_cast<long>(n) - 1);
                    acc += taps[k + radius] * line[j];
                }
                out[i] = acc;
            }
            for (std::size_t i = 0; i < n; ++i) data[offset + base + i * stride] = out[i];
        }
    }
}

std::vector<Blob> place_blobs(const SyntheticSpec& spec, Rng& rng) {
    const double n = spec.extent;
    const double r_lo = std::max(2.0, 0.09 * n), r_hi = std::max(r_lo + 0.5, 0.18 * n);
    const double margin = 2.0;
    std::vector<Blob> blobs;
    for (int k = 0; k < spec.n_blobs; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            Blob b;
            b.radii = Eigen::Vector3d(rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi));
            const double rmax = b.radii.maxCoeff();
            const double lo = margin + rmax, hi = n - 1 - margin - rmax;
            if (hi <= lo) continue;
            b.center = Eigen::Vector3d(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
            b.axes = so3::random_rotation(rng.next_u64()).matrix().transpose();
            b.amplitude = rng.uniform(0.3, 0.9);
            placed = true;
            for (const Blob& o : blobs)
                if ((o.center - b.center).norm() < rmax + o.radii.maxCoeff() + 1.0) {
                    placed = false;
                    break;
                }
            if (placed) blobs.push_back(b);
        }
        if (!placed)
            throw std::runtime_error("could not place " + std::to_string(spec.n_blobs) + " non-overlapping blobs in a " +
                                     std::to_string(spec.extent) + "^3 volume");
    }
    return blobs;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (extent < 5 || extent % 2 == 0) throw std::invalid_argument("extent must be odd and at least 5");
    if (n_blobs < 1) throw std::invalid_argument("n_blobs must be positive");
    if (n_labels < 2 || n_labels > n_blobs + 1) throw std::invalid_argument("n_labels must be in [2, n_blobs + 1]");
    if (!(deform_amplitude >= 0.0)) throw std::invalid_argument("deform_amplitude must be non-negative");
    if (!(deform_smoothness > 0.0)) throw std::invalid_argument("deform_smoothness must be positive");
}

DisplacementField smooth_random_field(Extent extent, double amplitude, double sigma, std::uint64_t seed) {
    DisplacementField f(extent);
    if (amplitude == 0.0) return f;
    // Filter noise on a padded grid and crop, so borders see full support.
    const auto pad = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    const Extent big{extent.depth + 2 * pad, extent.height + 2 * pad, extent.width + 2 * pad};
    std::vector<double> noise(3 * big.voxels());
    Rng rng(seed);
    for (double& v : noise) v = rng.normal();
    for (int c = 0; c < 3; ++c) gaussian_filter(noise, c * big.voxels(), big, sigma);
    for (int c = 0; c < 3; ++c)
        for (std::size_t z = 0; z < extent.depth; ++z)
            for (std::size_t y = 0; y < extent.height; ++y)
                for (std::size_t x = 0; x < extent.width; ++x)
                    f.component(c, extent.index(z, y, x)) = noise[c * big.voxels() + big.index(z + pad, y + pad, x + pad)];
    double max_norm = 0.0;
    for (std::size_t v = 0; v < extent.voxels(); ++v) {
        const double a = f.component(0, v), b = f.component(1, v), c = f.component(2, v);
        max_norm = std::max(max_norm, std::sqrt(a * a + b * b + c * c));
    }
    const double scale = amplitude / max_norm;
    for (double& v : f.data) v *= scale;
    return f;
}

DisplacementField invert_field(const DisplacementField& u, int iterations) {
    DisplacementField v(u.extent);
    DisplacementField sampled(u.extent);
    const auto shape = shape_of(u.extent, 3);
    for (int it = 0; it < iterations; ++it) {
        kernels::grid_sample_forward(shape, u.data, v.data, sampled.data);
        for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = -sampled.data[i];
    }
    return v;
}

VolumePair generate_pair(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto n = static_cast<std::size_t>(spec.extent);
    const Extent e{n, n, n};
    const std::vector<Blob> blobs = place_blobs(spec, rng);

    VolumePair pair;
    pair.fixed = ImageVolume(e, kBackground);
    pair.fixed_labels = LabelVolume(e, 0);
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
                double value = kBackground;
                for (std::size_t k = 0; k < blobs.size(); ++k) {
                    const Blob& b = blobs[k];
                    const Eigen::Vector3d local = b.axes * (p - b.center);
                    const double rho = local.cwiseQuotient(b.radii).norm();
                    // Edge width about 0.75 voxel along the mean radius.
                    const double sharp = b.radii.mean() / 0.75;
                    value += b.amplitude / (1.0 + std::exp(-(1.0 - rho) * sharp));
                    if (rho <= 1.0) pair.fixed_labels.at(z, y, x) = 1 + static_cast<int>(k) % (spec.n_labels - 1);
                }
                pair.fixed.at(z, y, x) = value;
            }
    for (double& v : pair.fixed.data) v = std::clamp(v + kNoise * rng.normal(), 0.0, 1.0);

    if (spec.deform_amplitude == 0.0) {
        pair.moving = pair.fixed;
        pair.moving_labels = pair.fixed_labels;
        pair.gt_field = DisplacementField(e);
        return pair;
    }
    pair.gt_field = smooth_random_field(e, spec.deform_amplitude, spec.deform_smoothness, rng.next_u64());
    pair.moving = warp_image(pair.fixed, *pair.gt_field);
    pair.moving_labels = warp_labels(pair.fixed_labels, *pair.gt_field);
    return pair;
}

namespace {

constexpr std::uint32_t kSvolVersion = 1;

void write_header(io::ByteWriter& w, std::uint8_t dtype, Extent e, const std::array<double, 3>& spacing) {
    w.magic("SVOL");
    w.u32(kSvolVersion);
    w.u8(dtype);
    w.u32(static_cast<std::uint32_t>(e.depth));
    w.u32(static_cast<std::uint32_t>(e.height));
    w.u32(static_cast<std::uint32_t>(e.width));
    for (double s : spacing) w.f64(s);
}

struct Header {
    std::uint8_t dtype;
    Extent extent;
    std::array<double, 3> spacing;
};

Header read_header(io::ByteReader& r, const std::filesystem::path& path, std::uint8_t expected_dtype) {
    if (!r.expect_magic("SVOL")) throw std::runtime_error("not a SVOL file: " + path.string());
    if (const auto v = r.u32(); v != kSvolVersion)
        throw std::runtime_error("unsupported SVOL version " + std::to_string(v) + " in " + path.string());
    Header h;
    h.dtype = r.u8();
    if (h.dtype != expected_dtype)
        throw std::runtime_error("SVOL dtype " + std::to_string(h.dtype) + " in " + path.string() + ", expected " +
                                 std::to_string(expected_dtype));
    h.extent.depth = r.u32();
    h.extent.height = r.u32();
    h.extent.width = r.u32();
    for (double& s : h.spacing) s = r.f64();
    const std::size_t per_voxel = expected_dtype == 0 ? 8 : expected_dtype == 1 ? 4 : 24;
    if (r.remaining() != h.extent.voxels() * per_voxel)
        throw std::runtime_error("SVOL payload of " + std::to_string(r.remaining()) + " bytes disagrees with extent " +
                                 std::to_string(h.extent.depth) + "x" + std::to_string(h.extent.height) + "x" +
                                 std::to_string(h.extent.width) + " in " + path.string());
    return h;
}

}  // namespace

void save_volume(const std::filesystem::path& path, const ImageVolume& v) {
    io::ByteWriter w;
    write_header(w, 0, v.extent, v.spacing);
    w.f64s(v.data);
    io::write_file_atomic(path, w.data());
}

void save_volume(const std::filesystem::path& path, const LabelVolume& v) {
    io::ByteWriter w;
    write_header(w, 1, v.extent, v.spacing);
    for (std::int32_t x : v.data) w.i32(x);
    io::write_file_atomic(path, w.data());
}

void save_volume(const std::filesystem::path& path, const DisplacementField& v) {
    io::ByteWriter w;
    write_header(w, 2, v.extent, v.spacing);
    w.f64s(v.data);
    io::write_file_atomic(path, w.data());
}

ImageVolume load_image(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path), path.string());
    const Header h = read_header(r, path, 0);
    ImageVolume v(h.extent);
    v.spacing = h.spacing;
    r.f64s(v.data);
    return v;
}

LabelVolume load_labels(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path), path.string());
    const Header h = read_header(r, path, 1);
    LabelVolume v(h.extent);
    v.spacing = h.spacing;
    for (auto& x : v.data) x = r.i32();
    return v;
}

DisplacementField load_field(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path), path.string());
    const Header h = read_header(r, path, 2);
    DisplacementField v(h.extent);
    v.spacing = h.spacing;
    r.f64s(v.data);
    return v;
}

void save_pair(const std::filesystem::path& dir, const VolumePair& pair, const std::string& extra_json) {
    std::filesystem::create_directories(dir);
    save_volume(dir / "fixed.svol", pair.fixed);
    save_volume(dir / "moving.svol", pair.moving);
    save_volume(dir / "fixed_labels.svol", pair.fixed_labels);
    save_volume(dir / "moving_labels.svol", pair.moving_labels);
    nlohmann::ordered_json manifest;
    manifest["fixed"] = "fixed.svol";
    manifest["moving"] = "moving.svol";
    manifest["fixed_labels"] = "fixed_labels.svol";
    manifest["moving_labels"] = "moving_labels.svol";
    if (pair.gt_field) {
        save_volume(dir / "field.svol", *pair.gt_field);
        manifest["field"] = "field.svol";
    }
    manifest["spacing_mm"] = pair.fixed.spacing;
    manifest["info"] = nlohmann::ordered_json::parse(extra_json);
    io::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

VolumePair load_pair(const std::filesystem::path& dir) {
    const auto bytes = io::read_file(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    VolumePair pair;
    pair.fixed = load_image(dir / manifest.at("fixed").get<std::string>());
    pair.moving = load_image(dir / manifest.at("moving").get<std::string>());
    pair.fixed_labels = load_labels(dir / manifest.at("fixed_labels").get<std::string>());
    pair.moving_labels = load_labels(dir / manifest.at("moving_labels").get<std::string>());
    if (manifest.contains("field")) pair.gt_field = load_field(dir / manifest.at("field").get<std::string>());
    return pair;
}

Split dataset_split(std::size_t n_pairs, double fraction, std::uint64_t seed, std::size_t n_test) {
    const double allowed[] = {1.0, 0.5, 0.25, 0.125};
    if (std::find(std::begin(allowed), std::end(allowed), fraction) == std::end(allowed))
        throw std::invalid_argument("fraction must be 1, 1/2, 1/4 or 1/8");
    if (n_test >= n_pairs) throw std::invalid_argument("test set leaves no training pairs");
    std::vector<std::size_t> perm(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) perm[i] = i;
    Rng rng(seed);
    for (std::size_t i = n_pairs; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Split s;
    s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
    const std::size_t n_train = n_pairs - n_test;
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n_train)));
    if (take == 0) throw std::invalid_argument("empty training subset");
    s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                   perm.begin() + static_cast<std::ptrdiff_t>(n_test + take));
    return s;
}

}  // namespace synth
}  // namespace steerreg
