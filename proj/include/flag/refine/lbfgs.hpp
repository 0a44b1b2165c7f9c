#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace flag::refine {

struct LbfgsConfig {
    std::size_t history = 10;
    std::size_t max_iterations = 50;
    double c1 = 1e-4;
    double c2 = 0.9;
    double initial_step = 1.0;
    std::size_t max_line_search = 25;  // bracketing and zoom evaluations, each
    double gradient_tolerance = 1e-10;  // on the infinity norm
    std::vector<std::size_t> eval_checkpoints{2, 5, 10, 25, 50};

    void validate() const;
};

/// Returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

/// Quantities of one accepted step along direction d with step length alpha.
struct WolfeStep {
    double alpha = 0.0;
    double f0 = 0.0, f1 = 0.0;    // phi(0), phi(alpha)
    double dg0 = 0.0, dg1 = 0.0;  // phi'(0), phi'(alpha)
    bool sufficient_decrease = false;
    bool curvature = false;
};

struct LbfgsResult {
    std::vector<double> x;
    double f = 0.0;
    std::vector<double> trace;  // objective after each iteration, trace[0] = f(x0)
    std::vector<WolfeStep> steps;
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    bool converged = false;
    bool line_search_failed = false;

    /// True when every accepted step satisfied both strong Wolfe inequalities.
    bool wolfe_ok() const;
};

/// Called with the iterate after each completed iteration (and with x0 as 0).
using IterateHook = std::function<void(std::size_t iteration, std::span<const double> x)>;

/// Limited-memory BFGS with a strong-Wolfe line search (bracketing followed
/// by cubic-interpolation zoom). A NumericError thrown by the objective during
/// the line search counts as an infinite value. Throws NumericError when
/// f(x0) is not finite. On line-search failure the best point seen is kept
/// and `line_search_failed` is set.
LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsConfig& cfg,
                           const IterateHook& hook = {});

}  // namespace flag::refine
