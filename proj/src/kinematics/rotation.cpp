#include "flag/kinematics/rotation.hpp"

#include <algorithm>

namespace flag::kin {

double determinant3(const Mat3<double>& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Vec3<double> matrix_to_axis_angle(const Mat3<double>& r) {
    const Vec3<double> w{0.5 * (r[2][1] - r[1][2]), 0.5 * (r[0][2] - r[2][0]), 0.5 * (r[1][0] - r[0][1])};
    const double s = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);  // sin(theta)
    const double c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);             // cos(theta)
    const double theta = std::atan2(s, c);
    if (theta < 1e-8) return w;  // R ~ I + [w]x
    if (theta < std::numbers::pi - 1e-3) {
        const double k = theta / s;
        return {w[0] * k, w[1] * k, w[2] * k};
    }
    // Near pi the antisymmetric part vanishes; recover the axis from
    // (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) u u^T.
    Mat3<double> uu{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) uu[i][j] = (0.5 * (r[i][j] + r[j][i]) - (i == j ? c : 0.0)) / (1.0 - c);
    int best = 0;
    for (int i = 1; i < 3; ++i) {
        if (uu[i][i] > uu[best][best]) best = i;
    }
    Vec3<double> u{uu[0][best], uu[1][best], uu[2][best]};
    const double n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    for (auto& x : u) x /= n;
    if (u[0] * w[0] + u[1] * w[1] + u[2] * w[2] < 0.0) {
        for (auto& x : u) x = -x;
    }
    return {u[0] * theta, u[1] * theta, u[2] * theta};
}

Vec3<double> canonicalize_axis_angle(const Vec3<double>& aa) {
    const double theta = std::sqrt(aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]);
    if (theta <= std::numbers::pi) return aa;
    const double two_pi = 2.0 * std::numbers::pi;
    double reduced = std::fmod(theta, two_pi);
    if (reduced > std::numbers::pi) reduced -= two_pi;
    const double k = reduced / theta;
    return {aa[0] * k, aa[1] * k, aa[2] * k};
}

Mat3<double> rot6d_decode(const Rot6d& v) {
    Vec3<double> a{v[0], v[1], v[2]};
    Vec3<double> b{v[3], v[4], v[5]};
    const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    if (!(na > 1e-12)) throw DomainError("rot6d_decode: first column is zero");
    for (auto& x : a) x /= na;
    const double proj = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for (int i = 0; i < 3; ++i) b[i] -= proj * a[i];
    const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    if (!(nb > 1e-12 * std::max(1.0, std::abs(proj)))) throw DomainError("rot6d_decode: columns are collinear");
    for (auto& x : b) x /= nb;
    const Vec3<double> c{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
    Mat3<double> r{};
    for (int i = 0; i < 3; ++i) {
        r[i][0] = a[i];
        r[i][1] = b[i];
        r[i][2] = c[i];
    }
    return r;
}

bool is_rotation(const Mat3<double>& r, double tol) {
    const Mat3<double> rtr = matmul3(transpose3(r), r);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            if (std::abs(rtr[i][j] - (i == j ? 1.0 : 0.0)) > tol) return false;
        }
    return std::abs(determinant3(r) - 1.0) <= tol;
}

}  // namespace flag::kin
