#pragma once

#include "steerreg/tensor.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace steerreg {

struct Extent {
    std::size_t depth = 0, height = 0, width = 0;

    std::size_t voxels() const { return depth * height * width; }
    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * height + y) * width + x; }
    friend bool operator==(const Extent&, const Extent&) = default;
};

/// Dense [D,H,W] volume with millimetre spacing per axis (z, y, x).
template <class T>
struct Volume {
    Extent extent;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    Volume() = default;
    explicit Volume(Extent e, T fill = T{}) : extent(e), data(e.voxels(), fill) {}

    T& at(std::size_t z, std::size_t y, std::size_t x) { return data[extent.index(z, y, x)]; }
    T at(std::size_t z, std::size_t y, std::size_t x) const { return data[extent.index(z, y, x)]; }
    friend bool operator==(const Volume&, const Volume&) = default;
};

using ImageVolume = Volume<double>;
using LabelVolume = Volume<std::int32_t>;

/// Per-voxel displacement in voxels, stored [3][D][H][W] as (dz, dy, dx).
struct DisplacementField {
    Extent extent;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<double> data;

    DisplacementField() = default;
    explicit DisplacementField(Extent e) : extent(e), data(3 * e.voxels(), 0.0) {}

    double& component(int c, std::size_t voxel) { return data[c * extent.voxels() + voxel]; }
    double component(int c, std::size_t voxel) const { return data[c * extent.voxels() + voxel]; }
    friend bool operator==(const DisplacementField&, const DisplacementField&) = default;
};

/// [1,1,D,H,W] tensor view of an image.
inline ad::Tensor to_tensor(const ImageVolume& v) {
    return ad::Tensor(ad::Shape{1, 1, v.extent.depth, v.extent.height, v.extent.width}, v.data);
}

/// [1,3,D,H,W] tensor view of a field.
inline ad::Tensor to_tensor(const DisplacementField& f) {
    return ad::Tensor(ad::Shape{1, 3, f.extent.depth, f.extent.height, f.extent.width}, f.data);
}

inline DisplacementField field_from_tensor(const ad::Tensor& t) {
    if (t.rank() != 5 || t.dim(0) != 1 || t.dim(1) != 3)
        throw std::invalid_argument("displacement tensor must be [1,3,D,H,W], got " + ad::shape_string(t.shape()));
    DisplacementField f(Extent{t.dim(2), t.dim(3), t.dim(4)});
    f.data = t.storage();
    return f;
}

inline ImageVolume image_from_tensor(const ad::Tensor& t) {
    if (t.rank() != 5 || t.dim(0) != 1 || t.dim(1) != 1)
        throw std::invalid_argument("image tensor must be [1,1,D,H,W], got " + ad::shape_string(t.shape()));
    ImageVolume v(Extent{t.dim(2), t.dim(3), t.dim(4)});
    v.data = t.storage();
    return v;
}

/// image(x + u(x)), trilinear with border clamp.
ImageVolume warp_image(const ImageVolume& image, const DisplacementField& field);
/// labels(round(x + u(x))), border clamp.
LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& field);

}  // namespace steerreg
