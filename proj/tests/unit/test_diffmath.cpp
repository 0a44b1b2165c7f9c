#include <doctest.h>

#include "flag/diffmath/grad_check.hpp"
#include "flag/diffmath/ops.hpp"
#include "flag/error.hpp"

#include <cmath>
#include <random>

using namespace flag::ad;
using flag::DomainError;
using flag::ShapeError;

namespace {

Array random_array(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = u(rng);
    return Array(shape, std::move(v));
}

// sum(out * weights) with fixed random weights, so that every output element
// contributes a distinct amount to the scalar.
Var weighted_sum(Tape& t, const Var& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum_all(mul(out, t.constant(random_array(out.shape(), rng))));
}

}  // namespace

TEST_CASE("forward values of basic primitives") {
    Tape t;
    CHECK(exp(t.constant(Array({1}, {0.0}))).value()[0] == 1.0);

    Var a = t.constant(Array({2, 3}, 1.0));
    Var b = t.constant(Array({3, 2}, 1.0));
    Var c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    for (double v : c.value().data()) CHECK(v == 3.0);

    Var s = softmax(t.constant(Array({3}, {1.0, 2.0, 3.0})));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(s.value()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
    CHECK(s.value()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
    CHECK(s.value()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
    CHECK(std::abs(s.value()[0] + s.value()[1] + s.value()[2] - 1.0) < 1e-12);
}

TEST_CASE("analytic derivatives") {
    SUBCASE("d(x^2)/dx at 3 is 6") {
        Array g = gradient([](Tape&, const Var& x) { return sum_all(square(x)); }, Array({1}, {3.0}));
        CHECK(g[0] == 6.0);
    }
    SUBCASE("sum of softmax is constant") {
        std::mt19937_64 rng(3);
        Array g = gradient([](Tape&, const Var& x) { return sum_all(softmax(x)); }, random_array({7}, rng));
        for (double v : g.data()) CHECK(std::abs(v) < 1e-15);
    }
    SUBCASE("leaf feeding two paths accumulates both") {
        Tape t;
        Var x = t.leaf(Array({2}, {1.5, -2.0}), true);
        Var y = sum_all(add(scale(x, 3.0), square(x)));
        t.backward(y);
        Array g = t.grad(x);
        CHECK(g[0] == doctest::Approx(3.0 + 2 * 1.5));
        CHECK(g[1] == doctest::Approx(3.0 - 4.0));
    }
    SUBCASE("unused leaves get zero gradient") {
        Tape t;
        Var x = t.leaf(Array({2}, 1.0), true);
        Var unused = t.leaf(Array({3}, 1.0), true);
        t.backward(sum_all(x));
        const Array g = t.grad(unused);
        for (double v : g.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("two-layer tanh network matches central differences") {
    std::mt19937_64 rng(11);
    const Array w1 = random_array({4, 6}, rng), b1 = random_array({6}, rng);
    const Array w2 = random_array({6, 1}, rng);
    auto net = [&](Tape& t, const Var& x) {
        Var h = tanh(add(matmul(x, t.constant(w1)), t.constant(b1)));
        return sum_all(tanh(matmul(h, t.constant(w2))));
    };
    for (int trial = 0; trial < 10; ++trial) {
        CHECK(grad_check(net, random_array({3, 4}, rng), 1e-6) < 1e-5);
    }
}

TEST_CASE("grad_check self-tests") {
    std::mt19937_64 rng(5);
    SUBCASE("linear function has zero error") {
        CHECK(grad_check([](Tape&, const Var& x) { return sum_all(x); }, random_array({5, 2}, rng), 1e-3) < 1e-10);
    }
    SUBCASE("non-scalar output is rejected") {
        CHECK_THROWS_AS(grad_check([](Tape&, const Var& x) { return x; }, random_array({3}, rng)), ShapeError);
    }
    SUBCASE("a wrong backward rule is caught") {
        // Forward computes x^3, backward claims 2x.
        auto broken_cube = [](Tape& t, const Var& x) {
            Array out = x.value();
            for (double& v : out.data()) v = v * v * v;
            Var y = t.record(
                std::move(out), {x},
                [x](Tape& tp, const Array& g, const Array&) {
                    Array& d = tp.grad_buffer(x.id());
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * 2.0 * x.value()[i];
                },
                "broken_cube");
            return sum_all(y);
        };
        CHECK(grad_check(broken_cube, random_array({4}, rng, 0.5, 1.5)) > 1e-2);
    }
}

TEST_CASE("every primitive passes gradient checks on 100 random inputs") {
    std::mt19937_64 rng(2024);
    for (auto name : primitive_names()) {
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const std::uint64_t wseed = rng();
            PrimitiveArgs args;
            ScalarFn f;
            Array x;
            if (name == "add" || name == "sub" || name == "mul" || name == "div") {
                // second operand broadcast over the leading axis
                const Array other = random_array({4}, rng, 0.5, 1.5);
                x = random_array({3, 4}, rng);
                f = [&, other, wseed](Tape& t, const Var& v) {
                    Var o = t.leaf(other, true);
                    return add(weighted_sum(t, apply_primitive(name, {v, o}), wseed),
                               weighted_sum(t, apply_primitive(name, {o, v}), wseed + 1));
                };
            } else if (name == "matmul") {
                const Array w = random_array({2, 4, 3}, rng);
                x = random_array({2, 5, 4}, rng);
                f = [&, w, wseed](Tape& t, const Var& v) {
                    return add(weighted_sum(t, matmul(v, t.constant(w)), wseed),
                               weighted_sum(t, matmul(transpose(v), v), wseed + 1));
                };
            } else if (name == "concat") {
                const Array other = random_array({3, 2}, rng);
                x = random_array({3, 4}, rng);
                f = [&, other, wseed](Tape& t, const Var& v) {
                    return weighted_sum(t, apply_primitive(name, {v, t.constant(other), v}, PrimitiveArgs{.axis = 1}),
                                        wseed);
                };
            } else {
                double lo = -1.0, hi = 1.0;
                if (name == "log" || name == "sqrt") lo = 0.2, hi = 2.0;
                Shape shape{3, 4, 5};
                if (name == "softmax" || name == "log_softmax" || name == "sum" || name == "mean") args.axis = trial % 3;
                if (name == "slice") args = PrimitiveArgs{.axis = 1, .start = 1, .length = 2};
                if (name == "broadcast") args.shape = Shape{2, 3, 4, 5};
                if (name == "gather") args = PrimitiveArgs{.axis = 1, .indices = {3, 0, 3}};
                if (name == "clamp_min") args.slope = 0.1;
                x = random_array(shape, rng, lo, hi);
                f = [&, args, wseed](Tape& t, const Var& v) { return weighted_sum(t, apply_primitive(name, {v}, args), wseed); };
            }
            worst = std::max(worst, grad_check(f, x, 1e-6));
        }
        INFO("primitive " << name);
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("error paths") {
    Tape t;
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(add(t.constant(Array({2, 3})), t.constant(Array({2}))), ShapeError);
        CHECK_THROWS_AS(matmul(t.constant(Array({2, 3})), t.constant(Array({2, 3}))), ShapeError);
    }
    SUBCASE("domain errors") {
        CHECK_THROWS_AS(log(t.constant(Array({2}, {1.0, 0.0}))), DomainError);
        CHECK_THROWS_AS(sqrt(t.constant(Array({1}, {-1.0}))), DomainError);
    }
    SUBCASE("non-finite values are rejected") {
        CHECK_THROWS_AS(Array({1}, {std::nan("")}), flag::NumericError);
        CHECK_THROWS_AS(exp(t.constant(Array({1}, {1000.0}))), flag::NumericError);
    }
    SUBCASE("backward preconditions") {
        Var x = t.leaf(Array({3}, 1.0), true);
        CHECK_THROWS_AS(t.backward(x), ShapeError);
        Var c = sum_all(t.constant(Array({3}, 1.0)));
        CHECK_THROWS_AS(t.backward(c), ShapeError);
    }
}

TEST_CASE("forward evaluation is bit-reproducible") {
    std::mt19937_64 rng(9);
    const Array x = random_array({16, 33}, rng), w = random_array({33, 64}, rng);
    auto run = [&] {
        Tape t;
        Var h = layer_norm(tanh(matmul(t.constant(x), t.constant(w))));
        return sum(softmax(h, 1), 0).value();
    };
    CHECK(run() == run());
}
