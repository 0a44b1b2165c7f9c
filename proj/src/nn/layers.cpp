#include "flag/nn/layers.hpp"

#include "flag/error.hpp"

#include <cmath>

namespace flag::nn {

Var activate(const Var& x, Act act) {
    switch (act) {
    case Act::none: return x;
    case Act::tanh: return ad::tanh(x);
    case Act::relu: return ad::relu(x);
    case Act::leaky_relu: return ad::leaky_relu(x, 0.01);
    }
    return x;
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out)
    : weight_{name + ".weight", Array({in, out}, 0.0), {}}, bias_{name + ".bias", Array({out}, 0.0), {}} {}

void Linear::init_uniform(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : weight_.value.data()) w = u(rng);
    for (double& b : bias_.value.data()) b = u(rng);
}

void Linear::zero() {
    weight_.value.fill(0.0);
    bias_.value.fill(0.0);
}

Var Linear::operator()(Tape& tape, const Var& x, bool trainable) const {
    return ad::add(ad::matmul(x, tape.parameter(weight_, trainable)), tape.parameter(bias_, trainable));
}

Mlp::Mlp(const std::string& name, const std::vector<std::size_t>& widths, std::vector<Act> acts)
    : acts_(std::move(acts)) {
    if (widths.size() < 2 || acts_.size() != widths.size() - 1) throw ShapeError("Mlp: widths/activations mismatch");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        layers_.emplace_back(name + ".l" + std::to_string(i), widths[i], widths[i + 1]);
    }
}

void Mlp::init_uniform(std::mt19937_64& rng) {
    for (auto& l : layers_) l.init_uniform(rng);
}

void Mlp::zero_last() { layers_.back().zero(); }

Var Mlp::operator()(Tape& tape, const Var& x, bool trainable) const {
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = activate(layers_[i](tape, h, trainable), acts_[i]);
    return h;
}

void Mlp::collect(std::vector<Parameter*>& out) {
    for (auto& l : layers_) l.collect(out);
}

Parameter make_vector(const std::string& name, std::size_t n, double fill) { return Parameter{name, Array({n}, fill), {}}; }

void zero_grads(const std::vector<Parameter*>& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace flag::nn
