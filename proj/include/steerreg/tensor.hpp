#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace steerreg::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Value of a single-element tensor.
    double item() const;

    /// Flat offset of a multi-index (bounds-checked).
    std::size_t offset(std::initializer_list<std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    double at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    /// Same data, new shape of equal size.
    Tensor reshaped(Shape shape) const;

    void fill(double v);
    /// this += other (same size).
    void add_in_place(const Tensor& other);

    double sum() const;
    double norm() const;
    double max_abs() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// max |a - b| over elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
/// ||a - b|| / ||b|| (Frobenius); returns ||a - b|| when b is zero.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace steerreg::ad
