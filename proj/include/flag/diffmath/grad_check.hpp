#pragma once

#include "flag/diffmath/tape.hpp"

#include <functional>

namespace flag::ad {

/// Scalar-valued function of one array, built on the supplied tape.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Throws ShapeError when `f` returns a non-scalar.
double grad_check(const ScalarFn& f, const Array& x, double h = 1e-6);

/// Reverse-mode gradient of `f` at `x`.
Array gradient(const ScalarFn& f, const Array& x);

/// Scalar loss built on the supplied tape from trainable parameters.
using LossFn = std::function<Var(Tape&)>;

/// Same error measure as grad_check, taken over parameter coordinates. At most
/// `max_entries` evenly strided coordinates are probed per parameter.
/// Parameter gradients are overwritten.
double param_grad_check(const LossFn& f, const std::vector<Parameter*>& params, std::size_t max_entries = 16,
                        double h = 1e-6);

}  // namespace flag::ad
