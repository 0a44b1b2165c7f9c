#include "flag/diffmath/tape.hpp"

#include "flag/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace flag::ad {

#if defined(__GLIBC__)
namespace {
// Every step frees and reallocates the same large buffers; serving them from
// the heap avoids a page fault per touched page on each allocation.
const bool heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
}  // namespace
#endif

void Parameter::zero_grad() const {
    if (grad.shape() != value.shape() || grad.empty()) {
        grad = Array(value.shape(), 0.0);
    } else {
        grad.fill(0.0);
    }
}

const Array& Var::value() const {
    if (!tape_) throw ShapeError("use of an unbound Var");
    return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

void accumulate(Array& dst, const Array& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    if (dst.size() != src.size()) throw ShapeError("gradient accumulation size mismatch");
    double* d = dst.ptr();
    const double* s = src.ptr();
    for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

Var Tape::leaf(Array value, bool requires_grad) {
    if (value.empty()) throw ShapeError("empty array on tape");
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p, bool trainable) {
    if (p.value.empty()) throw ShapeError("parameter '" + p.name + "' is uninitialized");
    Node node;
    node.borrowed = &p.value;
    node.requires_grad = trainable;
    node.param = trainable ? &p : nullptr;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Array value, const std::vector<Var>& inputs, BackwardFn backward, const char* op_name) {
    require_finite(value.data(), op_name);
    bool needs = false;
    for (const auto& in : inputs) {
        check(in);
        needs = needs || nodes_[in.id()].requires_grad;
    }
    Node node;
    node.owned = std::move(value);
    node.requires_grad = needs;
    if (needs) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::check(const Var& v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) throw ShapeError("Var does not belong to this tape");
}

const Array& Tape::value(const Var& v) const {
    check(v);
    return nodes_[v.id_].value();
}

bool Tape::requires_grad(const Var& v) const {
    check(v);
    return nodes_[v.id_].requires_grad;
}

Array& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Array(n.value().shape(), 0.0);
    return n.grad;
}

void Tape::backward(const Var& root) {
    check(root);
    Node& r = nodes_[root.id_];
    if (r.value().size() != 1) {
        throw ShapeError("backward root must be scalar, got shape " + shape_string(r.value().shape()));
    }
    if (!r.requires_grad) throw ShapeError("backward root is detached from every differentiable leaf");
    for (auto& n : nodes_) n.grad = Array();
    r.grad = Array(r.value().shape(), 1.0);
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.param) accumulate(n.param->grad, n.grad);
        if (n.backward) n.backward(*this, n.grad, n.value());
    }
}

Array Tape::grad(const Var& v) const {
    check(v);
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) return Array(n.value().shape(), 0.0);
    return n.grad;
}

void Tape::clear() { nodes_.clear(); }

}  // namespace flag::ad
