#pragma once

#include "flag/diffmath/tape.hpp"

#include <string_view>
#include <vector>

namespace flag::ad {

// Binary elementwise ops accept identical shapes or a "leading-axis expansion":
// the smaller operand's shape must equal a trailing suffix of the larger one
// (a rank-0 scalar is a suffix of anything). Any other mismatch is a ShapeError.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
Var neg(const Var& x);

/// [..., M, K] x [K, N] -> [..., M, N], or batched [B, M, K] x [B, K, N] -> [B, M, N].
Var matmul(const Var& a, const Var& b);

Var exp(const Var& x);
Var log(const Var& x);  // DomainError on non-positive input
Var tanh(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);
Var softplus(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);  // DomainError on non-positive input
Var clamp_min(const Var& x, double floor);

Var softmax(const Var& x, int axis = -1);
Var log_softmax(const Var& x, int axis = -1);

/// Reductions drop the reduced axis. Accumulation runs left to right.
Var sum(const Var& x, int axis);
Var mean(const Var& x, int axis);
Var sum_all(const Var& x);
Var mean_all(const Var& x);

Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, std::size_t start, std::size_t length);
/// Swaps the last two axes.
Var transpose(const Var& x);
/// Repeats `x` along new leading axes so that its shape becomes `target`.
Var broadcast(const Var& x, const Shape& target);
Var reshape(const Var& x, const Shape& target);
/// Selects `indices` along `axis`. Repeated indices accumulate in backward.
Var gather(const Var& x, int axis, const std::vector<std::size_t>& indices);
/// Normalizes over the last axis to zero mean / unit variance (no affine part).
Var layer_norm(const Var& x, double eps = 1e-5);
/// Forward identity, zero gradient.
Var stop_gradient(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

/// Extra arguments for apply_primitive.
struct PrimitiveArgs {
    int axis = -1;
    double slope = 0.01;
    std::size_t start = 0;
    std::size_t length = 1;
    Shape shape;
    std::vector<std::size_t> indices;
};

/// Names accepted by apply_primitive.
const std::vector<std::string_view>& primitive_names();

/// Dispatches a primitive by name.
Var apply_primitive(std::string_view name, const std::vector<Var>& inputs, const PrimitiveArgs& args = {});

namespace kernels {
/// C[M,N] += A[M,K] * B[K,N], row-major, k accumulated in ascending order.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
/// Out[N,M] = In[M,N]^T.
void transpose(const double* in, double* out, std::size_t m, std::size_t n);
}  // namespace kernels

}  // namespace flag::ad
