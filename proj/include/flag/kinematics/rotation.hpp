#pragma once

#include "flag/error.hpp"

#include <array>
#include <cmath>
#include <numbers>

namespace flag::kin {

template <class T>
using Vec3 = std::array<T, 3>;

/// Row-major 3x3 matrix: m[row][col].
template <class T>
using Mat3 = std::array<std::array<T, 3>, 3>;

using Rot6d = std::array<double, 6>;

template <class T>
Mat3<T> identity3() {
    Mat3<T> m{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m[i][j] = T(i == j ? 1.0 : 0.0);
    return m;
}

template <class T>
Mat3<T> matmul3(const Mat3<T>& a, const Mat3<T>& b) {
    Mat3<T> c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            T acc = a[i][0] * b[0][j];
            acc = acc + a[i][1] * b[1][j];
            acc = acc + a[i][2] * b[2][j];
            c[i][j] = acc;
        }
    return c;
}

template <class T>
Vec3<T> apply3(const Mat3<T>& m, const Vec3<T>& v) {
    Vec3<T> r{};
    for (int i = 0; i < 3; ++i) r[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    return r;
}

template <class T>
Mat3<T> transpose3(const Mat3<T>& m) {
    Mat3<T> t{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
    return t;
}

double determinant3(const Mat3<double>& m);

/// Primal value of a scalar; overloaded for dual numbers.
inline double value_of(double v) { return v; }

/// Rodrigues' formula. Below 1e-8 rad the second-order series is used, which
/// also keeps derivatives (for dual-number T) correct at the origin.
template <class T>
Mat3<T> axis_angle_to_matrix(const Vec3<T>& aa) {
    using std::cos;
    using std::sin;
    using std::sqrt;
    const T theta2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    Mat3<T> k{};
    k[0][0] = T(0.0), k[0][1] = -aa[2], k[0][2] = aa[1];
    k[1][0] = aa[2], k[1][1] = T(0.0), k[1][2] = -aa[0];
    k[2][0] = -aa[1], k[2][1] = aa[0], k[2][2] = T(0.0);
    const Mat3<T> k2 = matmul3(k, k);
    T a, b;
    if (value_of(theta2) < 1e-16) {
        a = T(1.0) - theta2 / 6.0;
        b = T(0.5) - theta2 / 24.0;
    } else {
        const T theta = sqrt(theta2);
        a = sin(theta) / theta;
        b = (T(1.0) - cos(theta)) / theta2;
    }
    Mat3<T> r = identity3<T>();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i][j] = r[i][j] + a * k[i][j] + b * k2[i][j];
    return r;
}

/// Matrix logarithm: axis-angle with magnitude in [0, pi].
Vec3<double> matrix_to_axis_angle(const Mat3<double>& r);

/// Reduces an axis-angle vector to the equivalent rotation with magnitude <= pi.
Vec3<double> canonicalize_axis_angle(const Vec3<double>& aa);

/// First two columns of `r`: (r00, r10, r20, r01, r11, r21).
template <class T>
std::array<T, 6> rot6d_encode(const Mat3<T>& r) {
    return {r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]};
}

/// Gram-Schmidt decoding. Throws DomainError for zero or collinear columns.
Mat3<double> rot6d_decode(const Rot6d& v);

/// True when `r` is orthonormal with determinant +1 within `tol`.
bool is_rotation(const Mat3<double>& r, double tol = 1e-9);

}  // namespace flag::kin
