#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <vector>

#include "polygonizer/tensor.hpp"

namespace polygonizer::tc {

struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();

    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

// Records a forward computation as an append-only node list. Node order is a
// topological order, so backward() is a single reverse sweep. A tape with
// recording disabled evaluates values only.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Var constant(Tensor<T> value) { return push_leaf(std::move(value), nullptr, false); }

    /// Leaf whose gradient is retained after backward().
    Var input(Tensor<T> value) { return push_leaf(std::move(value), nullptr, record_); }

    /// Leaf bound to a parameter; backward() accumulates into `param.grad`.
    Var param(Parameter<T>& param) {
        Node node;
        node.external = &param.value;
        node.param = &param;
        node.requires_grad = record_;
        nodes_.push_back(std::move(node));
        return last();
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.value;
    }
    const Shape& shape(Var v) const { return value(v).shape; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient of the last backward() target w.r.t. `v`; empty if no path.
    const Buffer<T>& grad(Var v) const { return nodes_.at(v.id).grad; }

    /// Zero-initialized on first access. Used by op backward functions.
    Buffer<T>& grad_buffer(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(value(Var{id}).size(), T(0));
        return n.grad;
    }
    Buffer<T>& grad_buffer(Var v) { return grad_buffer(v.id); }

    const std::vector<Tensor<T>>& saved(std::uint32_t id) const { return nodes_[id].saved; }

    /// Appends an op output. The backward function runs only when some input
    /// requires a gradient and recording is on.
    Var push(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward,
             std::vector<Tensor<T>> saved = {}) {
        bool needs = false;
        if (record_) {
            for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
        }
        Node node;
        node.value = std::move(value);
        node.requires_grad = needs;
        if (needs) {
            node.backward = std::move(backward);
            node.saved = std::move(saved);
        }
        nodes_.push_back(std::move(node));
        return last();
    }

    void backward(Var target) {
        if (value(target).size() != 1) {
            throw Error(ErrorCode::NonScalarOutput,
                        "backward target has shape " + shape_string(shape(target)));
        }
        for (Node& n : nodes_) n.grad.clear();
        if (!nodes_[target.id].requires_grad) return;
        grad_buffer(target)[0] = T(1);
        for (std::int64_t i = target.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
            if (n.param) {
                auto& g = n.param->grad;
                if (g.empty()) g.assign(n.grad.size(), T(0));
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        Buffer<T> grad;
        std::vector<Tensor<T>> saved;
        BackwardFn backward;
    };

    Var push_leaf(Tensor<T> value, Parameter<T>* param, bool requires_grad) {
        Node node;
        node.value = std::move(value);
        node.param = param;
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return last();
    }

    Var last() const { return Var{static_cast<std::uint32_t>(nodes_.size() - 1)}; }

    bool record_;
    std::vector<Node> nodes_;
};

}  // namespace polygonizer::tc
