#include "flag/training/adam.hpp"

#include "flag/error.hpp"

#include <cmath>

namespace flag::train {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    if (!(opt_.lr > 0.0)) throw UsageError("adam: learning rate must be positive");
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape(), 0.0);
        v_.emplace_back(p->value.shape(), 0.0);
        if (p->grad.shape() != p->value.shape()) p->grad = Array(p->value.shape(), 0.0);
    }
}

double global_grad_norm(const std::vector<Parameter*>& params) {
    double sq = 0.0;
    for (auto* p : params)
        for (double g : p->grad.data()) sq += g * g;
    return std::sqrt(sq);
}

double Adam::step() {
    for (auto* p : params_) {
        for (double g : p->grad.data()) {
            if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in " + p->name);
        }
    }
    const double norm = global_grad_norm(params_);
    const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i]->value.data();
        const auto g = params_[i]->grad.data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k] * clip;
            m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
            v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
            w[k] -= opt_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
        }
    }
    return norm;
}

void Adam::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

}  // namespace flag::train
