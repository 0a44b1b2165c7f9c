#pragma once

#include "flag/diffmath/tape.hpp"

#include <vector>

namespace flag::train {

using ad::Array;
using ad::Parameter;

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Global gradient-norm clip; non-positive disables clipping.
    double clip_norm = 10.0;
};

/// Adam with bias correction over a fixed parameter list. Gradients are read
/// from Parameter::grad; the caller zeroes them between steps.
class Adam {
public:
    Adam(std::vector<Parameter*> params, AdamOptions options);

    /// Applies one update. Throws NumericError on a non-finite gradient.
    /// Returns the pre-clip global gradient norm.
    double step();

    void zero_grad();
    std::size_t steps() const { return t_; }
    const AdamOptions& options() const { return opt_; }
    void set_lr(double lr) { opt_.lr = lr; }

private:
    std::vector<Parameter*> params_;
    AdamOptions opt_;
    std::vector<Array> m_, v_;
    std::size_t t_ = 0;
};

double global_grad_norm(const std::vector<Parameter*>& params);

}  // namespace flag::train
