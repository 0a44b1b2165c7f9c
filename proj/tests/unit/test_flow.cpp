#include <doctest.h>

#include "flag/diffmath/grad_check.hpp"
#include "flag/error.hpp"
#include "flag/flow/flow.hpp"
#include "support/toy_flow.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace flag;
using ad::Array;
using ad::Tape;
using ad::Var;
using flow::CouplingBlock;
using flow::FlowConfig;
using flow::FlowModel;

namespace {

Array random_array(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::shape_size(shape));
    for (auto& x : v) x = u(rng);
    return Array(shape, std::move(v));
}

void randomize_outputs(CouplingBlock& b, std::mt19937_64& rng) {
    b.scale_net().layer(b.scale_net().depth() - 1).init_uniform(rng);
    b.translate_net().layer(b.translate_net().depth() - 1).init_uniform(rng);
}

void randomize_outputs(FlowModel& m, std::mt19937_64& rng) {
    for (std::size_t k = 0; k < m.block_count(); ++k) randomize_outputs(m.block(k), rng);
}

FlowConfig small_config(std::size_t d, std::size_t c, std::size_t blocks, std::size_t hidden = 16) {
    FlowConfig cfg;
    cfg.pose_dim = d;
    cfg.cond_dim = c;
    cfg.blocks = blocks;
    cfg.hidden = hidden;
    cfg.taps = {};
    return cfg;
}

// log|det| by Gaussian elimination with partial pivoting.
double log_abs_det(std::vector<double> a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        if (piv != col)
            for (std::size_t k = 0; k < n; ++k) std::swap(a[col * n + k], a[piv * n + k]);
        const double p = a[col * n + col];
        acc += std::log(std::abs(p));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / p;
            for (std::size_t k = col; k < n; ++k) a[r * n + k] -= f * a[col * n + k];
        }
    }
    return acc;
}

template <class Map>
std::vector<double> fd_jacobian(const Map& map, const std::vector<double>& x, double h = 1e-6) {
    const std::size_t n = x.size();
    std::vector<double> jac(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        auto up = x, dn = x;
        up[i] += h;
        dn[i] -= h;
        const auto fu = map(up), fd = map(dn);
        for (std::size_t r = 0; r < n; ++r) jac[r * n + i] = (fu[r] - fd[r]) / (2.0 * h);
    }
    return jac;
}

CouplingBlock two_dim_example() {
    CouplingBlock b("b", 2, 1, 4, true);
    std::mt19937_64 rng(1);
    b.init(rng);
    b.scale_net().layer(2).bias().value[0] = std::atanh(std::log(2.0));
    b.translate_net().layer(2).bias().value[0] = 0.5;
    return b;
}

}  // namespace

TEST_CASE("coupling block with zeroed networks is the identity") {
    CouplingBlock b("b", 5, 3, 8, false);
    std::mt19937_64 rng(3);
    b.init(rng);
    Tape t;
    const Array x = random_array({4, 5}, rng);
    const Var c = t.constant(random_array({4, 3}, rng));
    auto r = b.forward(t, t.constant(x), c, false);
    CHECK(r.out.value() == x);
    for (double v : r.logdet.value().data()) CHECK(v == 0.0);
    CHECK(b.inverse(t, t.constant(x), c, false).out.value() == x);
}

TEST_CASE("hand-evaluated two-dimensional coupling") {
    const CouplingBlock b = two_dim_example();
    Tape t;
    const Var c = t.constant(Array({1, 1}, 0.3));
    auto r = b.forward(t, t.constant(Array({1, 2}, {1.0, 2.0})), c, false);
    CHECK(r.out.value()[0] == 1.0);
    CHECK(r.out.value()[1] == doctest::Approx(4.5).epsilon(1e-14));
    CHECK(r.logdet.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));

    auto inv = b.inverse(t, t.constant(Array({1, 2}, {1.0, 4.5})), c, false);
    CHECK(inv.out.value()[0] == 1.0);
    CHECK(inv.out.value()[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(inv.logdet.value()[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("coupling masks partition and alternate") {
    FlowModel m(small_config(7, 2, 4), 0);
    for (std::size_t k = 0; k < m.block_count(); ++k) {
        const auto& b = m.block(k);
        CHECK(b.keep_length() + b.rest_length() == 7);
        const bool keeps_first = b.keep_start() == 0;
        CHECK(keeps_first == (k % 2 == 0));
        if (keeps_first) CHECK(b.rest_start() == b.keep_length());
        else CHECK(b.keep_start() == b.rest_length());
    }
}

TEST_CASE("coupling log-det matches the finite-difference Jacobian") {
    std::mt19937_64 rng(11);
    CouplingBlock b("b", 2, 3, 16, true);
    b.init(rng);
    randomize_outputs(b, rng);
    for (int trial = 0; trial < 100; ++trial) {
        const Array c = random_array({1, 3}, rng);
        const Array x = random_array({1, 2}, rng, -2.0, 2.0);
        auto map = [&](const std::vector<double>& in) {
            Tape t;
            return b.forward(t, t.constant(Array({1, 2}, in)), t.constant(c), false).out.value().vec();
        };
        Tape t;
        const double analytic = b.forward(t, t.constant(x), t.constant(c), false).logdet.value()[0];
        CHECK(std::abs(analytic - log_abs_det(fd_jacobian(map, x.vec()), 2)) < 1e-6);
    }
}

TEST_CASE("coupling round trips") {
    std::mt19937_64 rng(12);
    CouplingBlock b("b", 6, 4, 16, false);
    b.init(rng);
    randomize_outputs(b, rng);
    Tape t;
    const Var y = t.constant(random_array({1000, 6}, rng, -3.0, 3.0));
    const Var c = t.constant(random_array({1000, 4}, rng));
    const Array back = b.forward(t, b.inverse(t, y, c, false).out, c, false).out.value();
    double worst = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) worst = std::max(worst, std::abs(back[i] - y.value()[i]));
    CHECK(worst < 1e-9);
}

TEST_CASE("flow forward and inverse") {
    SUBCASE("zero-initialized flow is the identity") {
        FlowModel m(small_config(6, 2, 4), 5);
        std::mt19937_64 rng(5);
        const Array z = random_array({3, 6}, rng);
        const Array c = random_array({3, 2}, rng);
        CHECK(m.forward(z, c) == z);
        CHECK(m.inverse(z, c) == z);
    }
    SUBCASE("1000 random round trips") {
        FlowModel m(small_config(66, 29, 8, 32), 6);
        std::mt19937_64 rng(6);
        randomize_outputs(m, rng);
        const Array z = random_array({1000, 66}, rng, -3.0, 3.0);
        const Array c = random_array({1000, 29}, rng);
        const Array back = m.inverse(m.forward(z, c), c);
        double worst = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(back[i] - z[i]));
        CHECK(worst < 1e-6);
    }
    SUBCASE("block order matters") {
        FlowModel m(small_config(4, 2, 2), 7);
        std::mt19937_64 rng(7);
        randomize_outputs(m, rng);
        Tape t;
        const Var z = t.constant(random_array({1, 4}, rng));
        const Var c = t.constant(random_array({1, 2}, rng));
        const Var ab = m.block(1).forward(t, m.block(0).forward(t, z, c, false).out, c, false).out;
        const Var ba = m.block(0).forward(t, m.block(1).forward(t, z, c, false).out, c, false).out;
        CHECK_FALSE(ab.value() == ba.value());
    }
    SUBCASE("condition changes the output") {
        FlowModel m(small_config(6, 3, 4), 8);
        std::mt19937_64 rng(8);
        randomize_outputs(m, rng);
        const Array z = random_array({1, 6}, rng);
        for (int i = 0; i < 20; ++i) {
            CHECK_FALSE(m.forward(z, random_array({1, 3}, rng)) == m.forward(z, random_array({1, 3}, rng)));
        }
    }
    SUBCASE("normalization buffers are honoured") {
        FlowModel m(small_config(2, 1, 2), 9);
        m.set_normalization(Array({1}, {2.0}), Array({1}, {4.0}), Array({2}, {1.0, -1.0}), Array({2}, {2.0, 0.5}));
        const Array z({1, 2}, {0.5, 0.5});
        const Array x = m.forward(z, Array({1, 1}, 0.0));
        CHECK(x[0] == 2.0);
        CHECK(x[1] == -0.75);
        const double expected = flow::standard_normal_log_density(z.data()) - std::log(2.0) - std::log(0.5);
        CHECK(m.log_prob(x, Array({1, 1}, 0.0))[0] == doctest::Approx(expected).epsilon(1e-14));
        CHECK_THROWS_AS(m.set_normalization(Array({1}, {0.0}), Array({1}, {0.0}), Array({2}, 0.0), Array({2}, 1.0)),
                        DomainError);
    }
    SUBCASE("shape errors") {
        FlowModel m(small_config(4, 2, 2), 10);
        CHECK_THROWS_AS(m.forward(Array({1, 3}, 0.0), Array({1, 2}, 0.0)), ShapeError);
        CHECK_THROWS_AS(m.forward(Array({1, 4}, 0.0), Array({1, 3}, 0.0)), ShapeError);
    }
}

TEST_CASE("flow log-density") {
    SUBCASE("identity flow at the origin") {
        FlowModel m(small_config(6, 2, 4), 1);
        const double lp = m.log_prob(Array({1, 6}, 0.0), Array({1, 2}, 0.0))[0];
        CHECK(lp == doctest::Approx(-3.0 * std::log(2.0 * std::numbers::pi)).epsilon(1e-15));
        CHECK(lp == doctest::Approx(-5.5136313).epsilon(1e-7));
    }
    SUBCASE("identity flow equals the base density") {
        FlowModel m(small_config(6, 2, 4), 1);
        std::mt19937_64 rng(2);
        const Array x = random_array({10, 6}, rng, -3.0, 3.0);
        const Array lp = m.log_prob(x, Array({10, 2}, 0.0));
        for (std::size_t i = 0; i < 10; ++i) {
            CHECK(lp[i] ==
                  doctest::Approx(flow::standard_normal_log_density(std::span<const double>(x.ptr() + 6 * i, 6)))
                      .epsilon(1e-14));
        }
    }
    SUBCASE("full Jacobian log-det for a 2-block flow") {
        FlowModel m(small_config(6, 3, 2), 4);
        std::mt19937_64 rng(4);
        randomize_outputs(m, rng);
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const Array c = random_array({1, 3}, rng);
            const Array x = random_array({1, 6}, rng, -2.0, 2.0);
            auto map = [&](const std::vector<double>& in) { return m.inverse(Array({1, 6}, in), c).vec(); };
            Tape t;
            Var ld;
            m.inverse(t, t.constant(x), t.constant(c), false, &ld);
            worst = std::max(worst, std::abs(ld.value()[0] - log_abs_det(fd_jacobian(map, x.vec()), 6)));
        }
        CHECK(worst < 1e-4);
    }
    SUBCASE("trained toy flow integrates to one") {
        const FlowModel m = testing::train_toy_flow(21, 800);
        const double mass = testing::integrate_density(m, 400);
        MESSAGE("toy flow mass ", mass);
        CHECK(mass >= 0.98);
        CHECK(mass <= 1.01);
    }
}

TEST_CASE("negative log-likelihood with intermediate supervision") {
    std::mt19937_64 rng(30);
    const Array x = random_array({5, 6}, rng, -2.0, 2.0);
    const Array c = random_array({5, 3}, rng);

    SUBCASE("no taps reduces to plain NLL") {
        FlowModel m(small_config(6, 3, 4), 30);
        randomize_outputs(m, rng);
        Tape t;
        const double nll = m.nll_loss(t, t.constant(x), t.constant(c), true, false).value()[0];
        const Array lp = m.log_prob(x, c);
        double mean = 0.0;
        for (double v : lp.data()) mean += v;
        CHECK(nll == doctest::Approx(-mean / 5.0).epsilon(1e-14));
    }
    SUBCASE("a single tap at the final block with unit weight doubles the loss") {
        FlowConfig cfg = small_config(6, 3, 4);
        cfg.taps = {4};
        FlowModel m(cfg, 31);
        randomize_outputs(m, rng);
        Tape t;
        const double with = m.nll_loss(t, t.constant(x), t.constant(c), true, false).value()[0];
        const double without = m.nll_loss(t, t.constant(x), t.constant(c), false, false).value()[0];
        CHECK(with == doctest::Approx(2.0 * without).epsilon(1e-14));
    }
    SUBCASE("desk taps against per-sample hand summation") {
        FlowConfig cfg = small_config(66, 29, 8, 16);
        cfg.taps = FlowConfig::default_taps(8);
        REQUIRE(cfg.taps == std::vector<std::size_t>{2, 4, 6});
        FlowModel m(cfg, 32);
        randomize_outputs(m, rng);
        const Array xb = random_array({4, 66}, rng, -1.0, 1.0);
        const Array cb = random_array({4, 29}, rng);
        Tape t;
        const double loss = m.nll_loss(t, t.constant(xb), t.constant(cb), true, false).value()[0];

        double total = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            const Array xi({1, 66}, std::vector<double>(xb.ptr() + 66 * i, xb.ptr() + 66 * (i + 1)));
            const Array ci({1, 29}, std::vector<double>(cb.ptr() + 29 * i, cb.ptr() + 29 * (i + 1)));
            auto prefix_logp = [&](std::size_t upto) {
                Tape s;
                Var h = s.constant(xi);
                const Var cv = s.constant(ci);
                double ld = 0.0;
                for (std::size_t k = upto; k-- > 0;) {
                    auto r = m.block(k).inverse(s, h, cv, false);
                    h = r.out;
                    ld += r.logdet.value()[0];
                }
                return flow::standard_normal_log_density(h.value().data()) + ld;
            };
            double sample = prefix_logp(8);
            for (std::size_t tap : {2u, 4u, 6u}) sample += (static_cast<double>(tap) / 8.0) * prefix_logp(tap);
            total -= sample;
        }
        CHECK(std::abs(loss - total / 4.0) < 1e-10);
    }
    SUBCASE("taps do not change the density or the maps") {
        FlowConfig cfg = small_config(6, 3, 4);
        cfg.taps = {2};
        FlowModel m(cfg, 33);
        randomize_outputs(m, rng);
        Tape t;
        const auto a = m.log_prob(t, t.constant(x), t.constant(c), true);
        const auto b = m.log_prob(t, t.constant(x), t.constant(c), false);
        CHECK(a.logp.value() == b.logp.value());
        CHECK(a.taps.size() == 1);
        CHECK(b.taps.empty());
    }
    SUBCASE("gradients match finite differences") {
        FlowConfig cfg = small_config(6, 3, 4, 8);
        cfg.taps = {2};
        FlowModel m(cfg, 34);
        randomize_outputs(m, rng);
        const double err_x = ad::grad_check(
            [&](Tape& t, const Var& xv) { return m.nll_loss(t, xv, t.constant(c), true, false); }, x);
        CHECK(err_x < 1e-5);
        const double err_p = ad::param_grad_check(
            [&](Tape& t) { return m.nll_loss(t, t.constant(x), t.constant(c), true, true); }, m.parameters(), 8);
        CHECK(err_p < 1e-5);
    }
}
