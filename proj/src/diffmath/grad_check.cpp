#include "flag/diffmath/grad_check.hpp"

#include "flag/error.hpp"

#include <algorithm>
#include <cmath>

namespace flag::ad {

namespace {

double evaluate(const ScalarFn& f, const Array& x) {
    Tape tape;
    Var out = f(tape, tape.constant(x));
    if (out.value().size() != 1) throw ShapeError("grad_check: function returned shape " + shape_string(out.shape()));
    return out.value()[0];
}

}  // namespace

Array gradient(const ScalarFn& f, const Array& x) {
    Tape tape;
    Var leaf = tape.leaf(x, true);
    Var out = f(tape, leaf);
    if (out.value().size() != 1) throw ShapeError("grad_check: function returned shape " + shape_string(out.shape()));
    if (!out.requires_grad()) return Array(x.shape(), 0.0);
    tape.backward(out);
    return tape.grad(leaf);
}

double grad_check(const ScalarFn& f, const Array& x, double h) {
    const Array analytic = gradient(f, x);
    double worst = 0.0;
    Array probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = evaluate(f, probe);
        probe[i] = orig - h;
        const double down = evaluate(f, probe);
        probe[i] = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

double param_grad_check(const LossFn& f, const std::vector<Parameter*>& params, std::size_t max_entries, double h) {
    auto value_of = [&] {
        Tape tape;
        Var out = f(tape);
        if (out.value().size() != 1) throw ShapeError("param_grad_check: loss is not scalar");
        return out.value()[0];
    };
    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        Var out = f(tape);
        if (out.value().size() != 1) throw ShapeError("param_grad_check: loss is not scalar");
        tape.backward(out);
    }
    double worst = 0.0;
    for (auto* p : params) {
        const Array analytic = p->grad;
        const std::size_t n = p->value.size();
        const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_entries));
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double up = value_of();
            p->value[i] = orig - h;
            const double down = value_of();
            p->value[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
        }
    }
    return worst;
}

}  // namespace flag::ad
