#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace decomp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor of 64-bit reals.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor from(Shape shape, std::initializer_list<double> values) {
        return Tensor(std::move(shape), std::vector<double>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Same data under a new shape with identical element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace decomp
