#pragma once

#include <cmath>

namespace flag::kin {

/// Forward-mode dual number carrying one tangent direction.
struct Dual {
    double v = 0.0;
    double d = 0.0;

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit lift of constants
    Dual(double value, double tangent) : v(value), d(tangent) {}
};

inline double value_of(const Dual& x) { return x.v; }

inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
inline Dual operator-(Dual a) { return {-a.v, -a.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
inline Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
inline Dual operator*(Dual a, double s) { return {a.v * s, a.d * s}; }
inline Dual operator*(double s, Dual a) { return {a.v * s, a.d * s}; }
inline Dual operator/(Dual a, double s) { return {a.v / s, a.d / s}; }

inline Dual sin(Dual x) { return {std::sin(x.v), std::cos(x.v) * x.d}; }
inline Dual cos(Dual x) { return {std::cos(x.v), -std::sin(x.v) * x.d}; }
inline Dual sqrt(Dual x) {
    const double s = std::sqrt(x.v);
    return {s, 0.5 * x.d / s};
}

}  // namespace flag::kin
