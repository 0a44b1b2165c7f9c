#pragma once

#include "flag/diffmath/ops.hpp"

#include <random>
#include <string>
#include <vector>

namespace flag::nn {

using ad::Array;
using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Act { none, tanh, relu, leaky_relu };

Var activate(const Var& x, Act act);

/// y = x W + b with W of shape [in, out].
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out);

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
    void init_uniform(std::mt19937_64& rng);
    void zero();

    Var operator()(Tape& tape, const Var& x, bool trainable) const;

    std::size_t in_features() const { return weight_.value.dim(0); }
    std::size_t out_features() const { return weight_.value.dim(1); }

    Parameter& weight() { return weight_; }
    Parameter& bias() { return bias_; }
    const Parameter& weight() const { return weight_; }
    const Parameter& bias() const { return bias_; }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    Parameter weight_;
    Parameter bias_;
};

/// Stack of Linear layers; `acts[i]` follows layer i.
class Mlp {
public:
    Mlp() = default;
    Mlp(const std::string& name, const std::vector<std::size_t>& widths, std::vector<Act> acts);

    void init_uniform(std::mt19937_64& rng);
    /// Zeroes the final layer, so the network outputs act(0) everywhere.
    void zero_last();

    Var operator()(Tape& tape, const Var& x, bool trainable) const;

    Linear& layer(std::size_t i) { return layers_.at(i); }
    std::size_t depth() const { return layers_.size(); }
    void collect(std::vector<Parameter*>& out);

private:
    std::vector<Linear> layers_;
    std::vector<Act> acts_;
};

/// A single learned vector.
Parameter make_vector(const std::string& name, std::size_t n, double fill = 0.0);

void zero_grads(const std::vector<Parameter*>& params);

}  // namespace flag::nn
