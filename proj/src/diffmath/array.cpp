#include "flag/diffmath/array.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

namespace flag::ad {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void require_finite(std::span<const double> values, const char* context) {
    // A double is non-finite exactly when its exponent bits are all set.
    constexpr std::uint64_t exponent = 0x7ff0000000000000ull;
    std::uint64_t bad = 0;
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        bad |= static_cast<std::uint64_t>((bits & exponent) == exponent);
    }
    if (bad) throw NumericError(std::string("non-finite value produced by ") + context);
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    if (!std::isfinite(fill)) throw NumericError("non-finite fill value");
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("zero-length dimension in shape " + shape_string(shape_));
    }
}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("zero-length dimension in shape " + shape_string(shape_));
    }
    if (shape_size(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
    }
    require_finite(data_, "array construction");
}

Array::Array(Shape shape, std::initializer_list<double> data) : Array(std::move(shape), std::vector<double>(data)) {}

Array Array::scalar(double value) { return Array(Shape{}, std::vector<double>{value}); }

std::size_t Array::dim(int axis) const {
    int r = static_cast<int>(rank());
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis out of range for shape " + shape_string(shape_));
    return shape_[static_cast<std::size_t>(a)];
}

double& Array::at(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }

double Array::at(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

double Array::item() const {
    if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_string(shape_));
    return data_[0];
}

Array Array::reshaped(Shape shape) const& {
    Array copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

Array Array::reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

bool Array::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

}  // namespace flag::ad
