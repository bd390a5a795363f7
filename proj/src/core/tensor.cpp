#include "decomp/tensor.hpp"

#include <cmath>
#include <sstream>

namespace decomp {

std::size_t shape_numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
void check_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one dimension");
    }
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace decomp
