#pragma once

#include "flag/flow/flow.hpp"
#include "flag/training/adam.hpp"

#include <cmath>
#include <random>

namespace flag::testing {

// Two-component planar mixture with a bent component, centred well inside [-6, 6]^2.
inline ad::Array toy_batch(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> v(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        if (coin(rng)) {
            const double a = g(rng);
            v[2 * i] = -1.5 + 0.6 * a;
            v[2 * i + 1] = 0.5 * a * a - 0.5 + 0.3 * g(rng);
        } else {
            v[2 * i] = 1.5 + 0.4 * g(rng);
            v[2 * i + 1] = 0.8 * g(rng);
        }
    }
    return ad::Array({n, 2}, std::move(v));
}

inline flow::FlowModel train_toy_flow(std::uint64_t seed, std::size_t steps = 1500) {
    flow::FlowConfig cfg;
    cfg.pose_dim = 2;
    cfg.cond_dim = 1;
    cfg.blocks = 6;
    cfg.hidden = 32;
    cfg.taps = {};
    flow::FlowModel model(cfg, seed);
    train::AdamOptions opt;
    opt.lr = 5e-3;
    train::Adam adam(model.parameters(), opt);
    std::mt19937_64 rng(seed + 1);
    const std::size_t batch = 128;
    const ad::Array cond({batch, 1}, 0.0);
    for (std::size_t s = 0; s < steps; ++s) {
        adam.zero_grad();
        ad::Tape tape;
        auto loss = model.nll_loss(tape, tape.constant(toy_batch(rng, batch)), tape.constant(cond), false, true);
        tape.backward(loss);
        adam.step();
    }
    return model;
}

// Trapezoid rule over [-6, 6]^2 with `nodes` points per axis.
inline double integrate_density(const flow::FlowModel& model, std::size_t nodes = 400) {
    const double lo = -6.0, hi = 6.0;
    const double h = (hi - lo) / static_cast<double>(nodes - 1);
    double total = 0.0;
    std::vector<double> row(2 * nodes);
    const ad::Array cond({nodes, 1}, 0.0);
    for (std::size_t i = 0; i < nodes; ++i) {
        const double x = lo + h * static_cast<double>(i);
        for (std::size_t j = 0; j < nodes; ++j) {
            row[2 * j] = x;
            row[2 * j + 1] = lo + h * static_cast<double>(j);
        }
        const ad::Array lp = model.log_prob(ad::Array({nodes, 2}, row), cond);
        const double wi = (i == 0 || i + 1 == nodes) ? 0.5 : 1.0;
        for (std::size_t j = 0; j < nodes; ++j) {
            const double wj = (j == 0 || j + 1 == nodes) ? 0.5 : 1.0;
            total += wi * wj * std::exp(lp[j]);
        }
    }
    return total * h * h;
}

}  // namespace flag::testing
