#include "flag/diffmath/ops.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>

namespace flag::ad {

namespace kernels {

namespace {

using v8 = double __attribute__((vector_size(64)));

inline v8 load8(const double* p) {
    v8 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store8(double* p, v8 v) { std::memcpy(p, &v, sizeof v); }

// C[i0:i0+R, j0:j0+8V] += A * B with the tile held in registers.
template <std::size_t R, std::size_t V>
inline void gemm_tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t i0,
                      std::size_t j0) {
    v8 acc[R][V];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < V; ++v) acc[r][v] = load8(c + (i0 + r) * n + j0 + 8 * v);
    const double* arow = a + i0 * k;
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * n + j0;
        v8 bv[V];
        for (std::size_t v = 0; v < V; ++v) bv[v] = load8(brow + 8 * v);
        for (std::size_t r = 0; r < R; ++r) {
            const double x = arow[r * k + p];
            for (std::size_t v = 0; v < V; ++v) acc[r][v] += x * bv[v];
        }
    }
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < V; ++v) store8(c + (i0 + r) * n + j0 + 8 * v, acc[r][v]);
}

inline void gemm_edge(const double* a, const double* b, double* c, std::size_t k, std::size_t n, std::size_t i0,
                      std::size_t i1, std::size_t j0, std::size_t j1) {
    for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) {
            double acc = c[i * n + j];
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

}  // namespace

void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    // Every C[i][j] accumulates its k terms in ascending order.
    constexpr std::size_t R = 8;
    const std::size_t mr = m - m % R, n16 = n - n % 16, n8 = n - n % 8;
    for (std::size_t i = 0; i < mr; i += R) {
        for (std::size_t j = 0; j < n16; j += 16) gemm_tile<R, 2>(a, b, c, k, n, i, j);
        if (n8 > n16) gemm_tile<R, 1>(a, b, c, k, n, i, n16);
    }
    std::size_t i = mr;
    for (; i + 4 <= m; i += 4) {
        for (std::size_t j = 0; j < n16; j += 16) gemm_tile<4, 2>(a, b, c, k, n, i, j);
        if (n8 > n16) gemm_tile<4, 1>(a, b, c, k, n, i, n16);
    }
    for (; i < m; ++i) {
        for (std::size_t j = 0; j < n16; j += 16) gemm_tile<1, 2>(a, b, c, k, n, i, j);
        if (n8 > n16) gemm_tile<1, 1>(a, b, c, k, n, i, n16);
    }
    gemm_edge(a, b, c, k, n, 0, m, n8, n);
}

void transpose(const double* in, double* out, std::size_t m, std::size_t n) {
    constexpr std::size_t tile = 32;
    for (std::size_t i0 = 0; i0 < m; i0 += tile) {
        for (std::size_t j0 = 0; j0 < n; j0 += tile) {
            const std::size_t i1 = std::min(m, i0 + tile), j1 = std::min(n, j0 + tile);
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
        }
    }
}

}  // namespace kernels

namespace {

Tape& tape_of(const Var& a, const Var& b) {
    if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) throw ShapeError("operands live on different tapes");
    return a.tape();
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

std::size_t norm_axis(int axis, std::size_t rank) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

/// outer x n x inner decomposition around an axis.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// Visits (i, ia, ib) for an output of n elements where one operand may be a
// trailing-suffix broadcast of size na or nb.
template <class F>
inline void for_each_pair(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
    if (na == n && nb == n) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    } else if (na == n) {
        for (std::size_t o = 0, i = 0; o < n / nb; ++o)
            for (std::size_t j = 0; j < nb; ++j, ++i) f(i, i, j);
    } else {
        for (std::size_t o = 0, i = 0; o < n / na; ++o)
            for (std::size_t j = 0; j < na; ++j, ++i) f(i, j, i);
    }
}

// Adds g (n_out elements) into dst, folding leading repeats when dst is smaller.
void reduce_into(Array& dst, const double* g, std::size_t n_out) {
    double* d = dst.ptr();
    const std::size_t nd = dst.size();
    for (std::size_t o = 0, i = 0; o < n_out / nd; ++o)
        for (std::size_t j = 0; j < nd; ++j, ++i) d[j] += g[i];
}

enum class BinOp { add, sub, mul, div };

Var binary(const Var& a, const Var& b, BinOp op, const char* name) {
    Tape& tape = tape_of(a, b);
    const Array& av = a.value();
    const Array& bv = b.value();
    Shape out_shape;
    if (av.shape() == bv.shape() || is_suffix(bv.shape(), av.shape())) {
        out_shape = av.shape();
    } else if (is_suffix(av.shape(), bv.shape())) {
        out_shape = bv.shape();
    } else {
        throw ShapeError(std::string(name) + ": shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()) + " do not conform");
    }
    const std::size_t n = shape_size(out_shape), na = av.size(), nb = bv.size();
    std::vector<double> out(n);
    double* po = out.data();
    const double* pa = av.ptr();
    const double* pb = bv.ptr();
    switch (op) {
    case BinOp::add:
        for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] + pb[ib]; });
        break;
    case BinOp::sub:
        for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] - pb[ib]; });
        break;
    case BinOp::mul:
        for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] * pb[ib]; });
        break;
    case BinOp::div:
        for (std::size_t i = 0; i < nb; ++i) {
            if (pb[i] == 0.0) throw DomainError("div: division by zero");
        }
        for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] / pb[ib]; });
        break;
    }
    return tape.record(
        Array(out_shape, std::move(out)), {a, b},
        [a, b, op, n, na, nb](Tape& t, const Array& g, const Array&) {
            const double* pg = g.ptr();
            const bool need_a = a.requires_grad(), need_b = b.requires_grad();
            if (op == BinOp::add || op == BinOp::sub) {
                if (need_a) reduce_into(t.grad_buffer(a.id()), pg, n);
                if (need_b) {
                    if (op == BinOp::add) {
                        reduce_into(t.grad_buffer(b.id()), pg, n);
                    } else {
                        double* d = t.grad_buffer(b.id()).ptr();
                        for_each_pair(n, na, nb, [&](std::size_t i, std::size_t, std::size_t ib) { d[ib] -= pg[i]; });
                    }
                }
                return;
            }
            const double* pa = a.value().ptr();
            const double* pb = b.value().ptr();
            if (op == BinOp::mul) {
                if (need_a) {
                    double* d = t.grad_buffer(a.id()).ptr();
                    for_each_pair(n, na, nb,
                                  [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += pg[i] * pb[ib]; });
                }
                if (need_b) {
                    double* d = t.grad_buffer(b.id()).ptr();
                    for_each_pair(n, na, nb,
                                  [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ib] += pg[i] * pa[ia]; });
                }
                return;
            }
            if (need_a) {
                double* d = t.grad_buffer(a.id()).ptr();
                for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { d[ia] += pg[i] / pb[ib]; });
            }
            if (need_b) {
                double* d = t.grad_buffer(b.id()).ptr();
                for_each_pair(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                    d[ib] -= pg[i] * pa[ia] / (pb[ib] * pb[ib]);
                });
            }
        },
        name);
}

// Elementwise unary op; `deriv(x, y)` is dy/dx.
template <class F, class D>
Var unary(const Var& x, F f, D deriv, const char* name) {
    const Array& xv = x.value();
    std::vector<double> out(xv.size());
    const double* px = xv.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
    return x.tape().record(
        Array(xv.shape(), std::move(out)), {x},
        [x, deriv](Tape& t, const Array& g, const Array& y) {
            double* d = t.grad_buffer(x.id()).ptr();
            const double* px = x.value().ptr();
            const double* py = y.ptr();
            const double* pg = g.ptr();
            for (std::size_t i = 0, n = g.size(); i < n; ++i) d[i] += pg[i] * deriv(px[i], py[i]);
        },
        name);
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::add, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::mul, "mul"); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::div, "div"); }

Var scale(const Var& x, double factor) {
    return unary(
        x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; }, "scale");
}

Var add_scalar(const Var& x, double offset) {
    return unary(
        x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; }, "add_scalar");
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var exp(const Var& x) {
    return unary(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

Var log(const Var& x) {
    for (double v : x.value().data()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value");
    }
    return unary(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

Var tanh(const Var& x) {
    return unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Var relu(const Var& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; },
        "relu");
}

Var leaky_relu(const Var& x, double slope) {
    return unary(
        x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; }, "leaky_relu");
}

Var softplus(const Var& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](double v, double) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        "softplus");
}

Var square(const Var& x) {
    return unary(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

Var sqrt(const Var& x) {
    for (double v : x.value().data()) {
        if (!(v > 0.0)) throw DomainError("sqrt of non-positive value");
    }
    return unary(
        x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; }, "sqrt");
}

Var clamp_min(const Var& x, double floor) {
    return unary(
        x, [floor](double v) { return v > floor ? v : floor; },
        [floor](double v, double) { return v > floor ? 1.0 : 0.0; }, "clamp_min");
}

Var matmul(const Var& a, const Var& b) {
    Tape& tape = tape_of(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul needs rank >= 2 operands");
    const std::size_t m = sa[sa.size() - 2], k = sa.back();
    bool batched = false;
    std::size_t batch = 1;
    if (sb.size() == 2) {
        for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    } else if (sb.size() == 3 && sa.size() == 3 && sa[0] == sb[0]) {
        batched = true;
        batch = sa[0];
    } else {
        throw ShapeError("matmul: unsupported shapes " + shape_string(sa) + " x " + shape_string(sb));
    }
    const std::size_t kb = sb[sb.size() - 2], n = sb.back();
    if (kb != k) throw ShapeError("matmul: inner dimensions differ " + shape_string(sa) + " x " + shape_string(sb));

    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(shape_size(out_shape), 0.0);
    if (batched) {
        for (std::size_t p = 0; p < batch; ++p)
            kernels::gemm_acc(a.value().ptr() + p * m * k, b.value().ptr() + p * k * n, out.data() + p * m * n, m, k,
                              n);
    } else {
        kernels::gemm_acc(a.value().ptr(), b.value().ptr(), out.data(), batch * m, k, n);
    }
    return tape.record(
        Array(std::move(out_shape), std::move(out)), {a, b},
        [a, b, batched, batch, m, k, n](Tape& t, const Array& g, const Array&) {
            const std::size_t rows = batched ? m : batch * m;
            const std::size_t reps = batched ? batch : 1;
            if (a.requires_grad()) {
                // dA = G * B^T
                double* da = t.grad_buffer(a.id()).ptr();
                std::vector<double> bt(k * n);
                for (std::size_t p = 0; p < reps; ++p) {
                    kernels::transpose(b.value().ptr() + p * k * n, bt.data(), k, n);
                    kernels::gemm_acc(g.ptr() + p * rows * n, bt.data(), da + p * rows * k, rows, n, k);
                }
            }
            if (b.requires_grad()) {
                // dB = A^T * G
                double* db = t.grad_buffer(b.id()).ptr();
                std::vector<double> at(rows * k);
                for (std::size_t p = 0; p < reps; ++p) {
                    kernels::transpose(a.value().ptr() + p * rows * k, at.data(), rows, k);
                    kernels::gemm_acc(at.data(), g.ptr() + p * rows * n, db + p * k * n, k, rows, n);
                }
            }
        },
        "matmul");
}

Var softmax(const Var& x, int axis) {
    const Array& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    const AxisSplit s = split(xv.shape(), ax);
    std::vector<double> out(xv.size());
    const double* px = xv.ptr();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double mx = px[base];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) {
                const double e = std::exp(px[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
        }
    }
    return x.tape().record(
        Array(xv.shape(), std::move(out)), {x},
        [x, s](Tape& t, const Array& g, const Array& y) {
            double* d = t.grad_buffer(x.id()).ptr();
            const double* py = y.ptr();
            const double* pg = g.ptr();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.n * s.inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s.n; ++j) dot += pg[base + j * s.inner] * py[base + j * s.inner];
                    for (std::size_t j = 0; j < s.n; ++j) {
                        const std::size_t idx = base + j * s.inner;
                        d[idx] += py[idx] * (pg[idx] - dot);
                    }
                }
            }
        },
        "softmax");
}

Var log_softmax(const Var& x, int axis) {
    const Array& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    const AxisSplit s = split(xv.shape(), ax);
    std::vector<double> out(xv.size());
    const double* px = xv.ptr();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double mx = px[base];
            for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) total += std::exp(px[base + j * s.inner] - mx);
            const double lse = mx + std::log(total);
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = px[base + j * s.inner] - lse;
        }
    }
    return x.tape().record(
        Array(xv.shape(), std::move(out)), {x},
        [x, s](Tape& t, const Array& g, const Array& y) {
            double* d = t.grad_buffer(x.id()).ptr();
            const double* py = y.ptr();
            const double* pg = g.ptr();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.n * s.inner + in;
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < s.n; ++j) gsum += pg[base + j * s.inner];
                    for (std::size_t j = 0; j < s.n; ++j) {
                        const std::size_t idx = base + j * s.inner;
                        d[idx] += pg[idx] - std::exp(py[idx]) * gsum;
                    }
                }
            }
        },
        "log_softmax");
}

Var sum(const Var& x, int axis) {
    const Array& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    const AxisSplit s = split(xv.shape(), ax);
    Shape out_shape = xv.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    std::vector<double> out(s.outer * s.inner, 0.0);
    const double* px = xv.ptr();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += px[(o * s.n + j) * s.inner + in];
    return x.tape().record(
        Array(std::move(out_shape), std::move(out)), {x},
        [x, s](Tape& t, const Array& g, const Array&) {
            double* d = t.grad_buffer(x.id()).ptr();
            const double* pg = g.ptr();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t j = 0; j < s.n; ++j)
                    for (std::size_t in = 0; in < s.inner; ++in) d[(o * s.n + j) * s.inner + in] += pg[o * s.inner + in];
        },
        "sum");
}

Var mean(const Var& x, int axis) {
    const std::size_t n = x.value().dim(axis);
    return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

Var sum_all(const Var& x) {
    const Array& xv = x.value();
    double total = 0.0;
    for (double v : xv.data()) total += v;
    return x.tape().record(
        Array::scalar(total), {x},
        [x](Tape& t, const Array& g, const Array&) {
            Array& d = t.grad_buffer(x.id());
            const double gv = g[0];
            for (double& v : d.data()) v += gv;
        },
        "sum_all");
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero arrays");
    const Shape& first = parts.front().shape();
    const std::size_t ax = norm_axis(axis, first.size());
    Shape out_shape = first;
    out_shape[ax] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (&p.tape() != &parts.front().tape()) throw ShapeError("concat across tapes");
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != first[i]) throw ShapeError("concat: shape mismatch off the concat axis");
        }
        out_shape[ax] += s[ax];
        widths.push_back(s[ax]);
    }
    const AxisSplit so = split(out_shape, ax);
    std::vector<double> out(shape_size(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const double* src = parts[p].value().ptr();
        const std::size_t chunk = widths[p] * so.inner;
        for (std::size_t o = 0; o < so.outer; ++o)
            std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + o * so.n * so.inner + offset * so.inner);
        offset += widths[p];
    }
    return parts.front().tape().record(
        Array(std::move(out_shape), std::move(out)), parts,
        [parts, widths, so](Tape& t, const Array& g, const Array&) {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < parts.size(); ++p) {
                const std::size_t chunk = widths[p] * so.inner;
                if (parts[p].requires_grad()) {
                    double* d = t.grad_buffer(parts[p].id()).ptr();
                    for (std::size_t o = 0; o < so.outer; ++o) {
                        const double* src = g.ptr() + o * so.n * so.inner + offset * so.inner;
                        for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += src[i];
                    }
                }
                offset += widths[p];
            }
        },
        "concat");
}

Var slice(const Var& x, int axis, std::size_t start, std::size_t length) {
    const Array& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    if (length == 0 || start + length > xv.shape()[ax]) throw ShapeError("slice out of range");
    const AxisSplit s = split(xv.shape(), ax);
    Shape out_shape = xv.shape();
    out_shape[ax] = length;
    std::vector<double> out(shape_size(out_shape));
    const std::size_t chunk = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
        const double* src = xv.ptr() + o * s.n * s.inner + start * s.inner;
        std::copy(src, src + chunk, out.data() + o * chunk);
    }
    return x.tape().record(
        Array(std::move(out_shape), std::move(out)), {x},
        [x, s, start, chunk](Tape& t, const Array& g, const Array&) {
            double* d = t.grad_buffer(x.id()).ptr();
            for (std::size_t o = 0; o < s.outer; ++o) {
                double* dst = d + o * s.n * s.inner + start * s.inner;
                const double* src = g.ptr() + o * chunk;
                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
        },
        "slice");
}

Var transpose(const Var& x) {
    const Array& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("transpose needs rank >= 2");
    const std::size_t m = xv.shape()[xv.rank() - 2], n = xv.shape().back();
    const std::size_t batch = xv.size() / (m * n);
    Shape out_shape = xv.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    std::vector<double> out(xv.size());
    for (std::size_t p = 0; p < batch; ++p) kernels::transpose(xv.ptr() + p * m * n, out.data() + p * m * n, m, n);
    return x.tape().record(
        Array(std::move(out_shape), std::move(out)), {x},
        [x, batch, m, n](Tape& t, const Array& g, const Array&) {
            double* d = t.grad_buffer(x.id()).ptr();
            std::vector<double> tmp(m * n);
            for (std::size_t p = 0; p < batch; ++p) {
                kernels::transpose(g.ptr() + p * m * n, tmp.data(), n, m);
                for (std::size_t i = 0; i < m * n; ++i) d[p * m * n + i] += tmp[i];
            }
        },
        "transpose");
}

Var broadcast(const Var& x, const Shape& target) {
    const Array& xv = x.value();
    if (!is_suffix(xv.shape(), target)) {
        throw ShapeError("broadcast: " + shape_string(xv.shape()) + " is not a suffix of " + shape_string(target));
    }
    const std::size_t n = shape_size(target), nx = xv.size();
    std::vector<double> out(n);
    for (std::size_t o = 0; o < n / nx; ++o) std::copy(xv.ptr(), xv.ptr() + nx, out.data() + o * nx);
    return x.tape().record(
        Array(target, std::move(out)), {x},
        [x, n](Tape& t, const Array& g, const Array&) { reduce_into(t.grad_buffer(x.id()), g.ptr(), n); },
        "broadcast");
}

Var reshape(const Var& x, const Shape& target) {
    Array out = x.value().reshaped(target);
    return x.tape().record(
        std::move(out), {x},
        [x](Tape& t, const Array& g, const Array&) {
            double* d = t.grad_buffer(x.id()).ptr();
            for (std::size_t i = 0, n = g.size(); i < n; ++i) d[i] += g[i];
        },
        "reshape");
}

Var gather(const Var& x, int axis, const std::vector<std::size_t>& indices) {
    const Array& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    if (indices.empty()) throw ShapeError("gather with no indices");
    const AxisSplit s = split(xv.shape(), ax);
    for (auto i : indices) {
        if (i >= s.n) throw ShapeError("gather index out of range");
    }
    Shape out_shape = xv.shape();
    out_shape[ax] = indices.size();
    const std::size_t k = indices.size();
    std::vector<double> out(s.outer * k * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < k; ++j) {
            const double* src = xv.ptr() + (o * s.n + indices[j]) * s.inner;
            std::copy(src, src + s.inner, out.data() + (o * k + j) * s.inner);
        }
    return x.tape().record(
        Array(std::move(out_shape), std::move(out)), {x},
        [x, s, indices, k](Tape& t, const Array& g, const Array&) {
            double* d = t.grad_buffer(x.id()).ptr();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t j = 0; j < k; ++j) {
                    double* dst = d + (o * s.n + indices[j]) * s.inner;
                    const double* src = g.ptr() + (o * k + j) * s.inner;
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                }
        },
        "gather");
}

Var layer_norm(const Var& x, double eps) {
    const Array& xv = x.value();
    if (xv.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = xv.size() / n;
    std::vector<double> out(xv.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = xv.ptr() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += px[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (px[j] - mu) * is;
    }
    return x.tape().record(
        Array(xv.shape(), std::move(out)), {x},
        [x, n, rows, inv_std = std::move(inv_std)](Tape& t, const Array& g, const Array& y) {
            double* d = t.grad_buffer(x.id()).ptr();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* pg = g.ptr() + r * n;
                const double* py = y.ptr() + r * n;
                double mg = 0.0, mgy = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    mg += pg[j];
                    mgy += pg[j] * py[j];
                }
                mg *= inv_n;
                mgy *= inv_n;
                for (std::size_t j = 0; j < n; ++j) d[r * n + j] += inv_std[r] * (pg[j] - mg - py[j] * mgy);
            }
        },
        "layer_norm");
}

Var stop_gradient(const Var& x) { return x.tape().constant(x.value()); }

const std::vector<std::string_view>& primitive_names() {
    static const std::vector<std::string_view> names = {
        "add",  "sub",        "mul",     "div",         "matmul", "exp",  "log",    "tanh",
        "leaky_relu", "softmax", "log_softmax", "sum", "mean", "concat", "slice", "transpose",
        "broadcast", "square", "sqrt", "layer_norm", "gather", "relu", "softplus", "clamp_min"};
    return names;
}

Var apply_primitive(std::string_view name, const std::vector<Var>& in, const PrimitiveArgs& args) {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            throw ShapeError(std::string(name) + " expects " + std::to_string(n) + " inputs, got " +
                             std::to_string(in.size()));
        }
    };
    if (name == "concat") return concat(in, args.axis);
    if (name == "add" || name == "sub" || name == "mul" || name == "div" || name == "matmul") {
        need(2);
        if (name == "add") return add(in[0], in[1]);
        if (name == "sub") return sub(in[0], in[1]);
        if (name == "mul") return mul(in[0], in[1]);
        if (name == "div") return div(in[0], in[1]);
        return matmul(in[0], in[1]);
    }
    need(1);
    const Var& x = in[0];
    if (name == "exp") return exp(x);
    if (name == "log") return log(x);
    if (name == "tanh") return tanh(x);
    if (name == "relu") return relu(x);
    if (name == "leaky_relu") return leaky_relu(x, args.slope);
    if (name == "softplus") return softplus(x);
    if (name == "softmax") return softmax(x, args.axis);
    if (name == "log_softmax") return log_softmax(x, args.axis);
    if (name == "sum") return sum(x, args.axis);
    if (name == "mean") return mean(x, args.axis);
    if (name == "slice") return slice(x, args.axis, args.start, args.length);
    if (name == "transpose") return transpose(x);
    if (name == "broadcast") return broadcast(x, args.shape);
    if (name == "square") return square(x);
    if (name == "sqrt") return sqrt(x);
    if (name == "layer_norm") return layer_norm(x);
    if (name == "gather") return gather(x, args.axis, args.indices);
    if (name == "clamp_min") return clamp_min(x, args.slope);
    throw ShapeError("unknown primitive '" + std::string(name) + "'");
}

}  // namespace flag::ad
