#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace flag::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Every element is finite; constructors that receive data reject NaN/Inf.
/// A rank-0 array (empty shape) holds a single scalar.
class Array {
public:
    Array() = default;
    explicit Array(Shape shape, double fill = 0.0);
    Array(Shape shape, std::vector<double> data);
    Array(Shape shape, std::initializer_list<double> data);

    static Array scalar(double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t dim(int axis) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    /// Value of a single-element array.
    double item() const;

    /// Same data, new shape with identical element count.
    Array reshaped(Shape shape) const&;
    Array reshaped(Shape shape) &&;

    bool all_finite() const noexcept;
    void fill(double value);

    friend bool operator==(const Array& a, const Array& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Throws NumericError naming `context` when any element is NaN or infinite.
void require_finite(std::span<const double> values, const char* context);

}  // namespace flag::ad
