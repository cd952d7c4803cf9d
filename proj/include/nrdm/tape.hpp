#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nrdm/tensor.hpp"

namespace nrdm {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
    friend bool operator==(Var, Var) = default;
};

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order of the (acyclic) graph; backward() walks it once in
/// reverse. A node requires a gradient iff one of its inputs does, and nodes
/// that don't keep no backward closure.
template <std::floating_point T>
class Tape {
public:
    using TensorT = BasicTensor<T>;
    /// Called with the tape and the node's output gradient; pushes
    /// contributions into its inputs through accumulate().
    using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    Var constant(TensorT value) { return push(std::move(value), false, {}); }
    Var variable(TensorT value) { return push(std::move(value), true, {}); }

    Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(TensorT value, std::span<const Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
        return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
    }

    const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient of the last backward() target w.r.t. `v`; zeros if `v`
    /// received no contribution.
    TensorT grad(Var v) const {
        const Node& node = nodes_.at(v.id);
        if (node.grad) return *node.grad;
        return TensorT(node.value.shape());
    }

    bool has_grad(Var v) const { return nodes_.at(v.id).grad.has_value(); }

    /// Adds `g` into the gradient buffer of `v`. No-op for constants.
    void accumulate(Var v, std::span<const T> g) {
        Node& node = nodes_.at(v.id);
        if (!node.requires_grad) return;
        if (g.size() != node.value.size())
            throw ShapeError("gradient length " + std::to_string(g.size()) + " does not match value shape " +
                             to_string(node.value.shape()));
        if (!node.grad) {
            node.grad = TensorT(node.value.shape(), std::vector<T>(g.begin(), g.end()));
            return;
        }
        T* dst = node.grad->raw();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    /// Mutable gradient buffer of `v`, allocated as zeros on first use.
    /// Returns nullptr for constants.
    TensorT* grad_buffer(Var v) {
        Node& node = nodes_.at(v.id);
        if (!node.requires_grad) return nullptr;
        if (!node.grad) node.grad = TensorT(node.value.shape());
        return &*node.grad;
    }

    /// Populates d(loss)/d(node) for every node that requires a gradient.
    /// Gradients from any earlier backward() on this tape are discarded.
    void backward(Var loss) {
        const Node& target = nodes_.at(loss.id);
        if (target.value.size() != 1)
            throw ShapeError("backward() needs a scalar loss, got shape " + to_string(target.value.shape()));
        for (Node& node : nodes_) node.grad.reset();
        if (!target.requires_grad) return;
        nodes_[loss.id].grad = TensorT(target.value.shape(), T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.grad || !node.backward) continue;
            // Closures only touch inputs (lower ids), so this reference stays valid.
            node.backward(*this, *node.grad);
        }
    }

private:
    struct Node {
        TensorT value;
        bool requires_grad = false;
        BackwardFn backward;
        std::optional<TensorT> grad;
    };

    Var push(TensorT value, bool requires_grad, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(fn), std::nullopt});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

}  // namespace nrdm
