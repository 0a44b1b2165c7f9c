#pragma once

#include "flag/diffmath/array.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace flag::ad {

/// Trainable tensor owned by a model. Gradients from Tape::backward accumulate
/// into `grad`, which is an accumulator and therefore writable through const access.
struct Parameter {
    std::string name;
    Array value;
    mutable Array grad;

    void zero_grad() const;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
public:
    Var() = default;

    const Array& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(int axis) const { return value().dim(axis); }
    bool requires_grad() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Record of executed primitives for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede outputs and
/// a single reverse sweep visits each node once. A Tape is single-threaded.
class Tape {
public:
    /// Backward rule: receives the gradient flowing into the output node and the
    /// output value, and adds input contributions through Tape::grad_buffer.
    using BackwardFn = std::function<void(Tape&, const Array& out_grad, const Array& out_value)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Array value, bool requires_grad = false);
    Var constant(Array value) { return leaf(std::move(value), false); }
    Var scalar(double value) { return leaf(Array::scalar(value), false); }

    /// Borrows `p.value`; the parameter must outlive the tape. When trainable,
    /// backward adds into `p.grad`.
    Var parameter(const Parameter& p, bool trainable = true);

    /// Appends a computed node. `requires_grad` is inherited from the inputs.
    Var record(Array value, const std::vector<Var>& inputs, BackwardFn backward, const char* op_name);

    const Array& value(const Var& v) const;
    bool requires_grad(const Var& v) const;

    /// Reverse sweep from a scalar root.
    void backward(const Var& root);

    /// Gradient of the last backward() root with respect to `v` (zeros when unreached).
    Array grad(const Var& v) const;

    /// Zero-initialized gradient accumulator of node `id`, for use inside backward rules.
    Array& grad_buffer(std::size_t id);

    std::size_t size() const noexcept { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Array owned;
        const Array* borrowed = nullptr;
        Array grad;
        const Parameter* param = nullptr;
        BackwardFn backward;
        bool requires_grad = false;

        const Array& value() const { return borrowed ? *borrowed : owned; }
    };

    void check(const Var& v) const;

    std::deque<Node> nodes_;
};

/// Accumulates `src` into `dst`, allocating zeros when `dst` is empty.
void accumulate(Array& dst, const Array& src);

}  // namespace flag::ad
