#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "msmg/error.hpp"
#include "msmg/params.hpp"
#include "msmg/tensor.hpp"

namespace msmg {

// Reverse-mode tape. Every forward op appends one node holding its output
// value and a closure computing the vector-Jacobian product into the inputs'
// gradient buffers. backward() walks the nodes in exact reverse execution
// order, then accumulates parameter gradients into the owning ParamStore.
//
// One Graph serves one forward pass; build a fresh graph per training step.
// A forward pass that never calls backward() allocates no gradient storage.
template <class T>
class Graph {
  public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    int leaf(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return last();
    }

    // Leaf tied to a ParamStore entry; its gradient is pushed back on backward().
    int param(ParamStore<T>& store, int param_index) {
        Node n;
        n.value = store.value(param_index);
        n.needs_grad = true;
        n.param_store = &store;
        n.param_index = param_index;
        nodes_.push_back(std::move(n));
        return last();
    }

    template <class Fn>
    int op(Tensor<T> value, std::initializer_list<int> inputs, Fn&& bw) {
        return op(std::move(value), std::vector<int>(inputs), std::forward<Fn>(bw));
    }

    template <class Fn>
    int op(Tensor<T> value, const std::vector<int>& inputs, Fn&& bw) {
        Node n;
        n.value = std::move(value);
        for (int i : inputs)
            if (i >= 0 && nodes_[static_cast<std::size_t>(i)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.backward = std::forward<Fn>(bw);
        nodes_.push_back(std::move(n));
        return last();
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Gradient buffer, allocated (zeroed) on first touch.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool grad_touched(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    // Seeds d(loss)/d(loss) = 1 and propagates. Parameter gradients are
    // accumulated (+=) into their stores, so repeated forward+backward passes
    // without zero_grad() sum up.
    void backward(int loss_id) {
        const Node& loss = nodes_.at(static_cast<std::size_t>(loss_id));
        if (loss.value.size() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " +
                             shape_str(loss.value.shape));
        grad(loss_id)[0] = T(1);
        for (int id = loss_id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, id);
            if (n.param_store) {
                Tensor<T>& pg = n.param_store->grad(n.param_index);
                for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
            }
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        ParamStore<T>* param_store = nullptr;
        int param_index = -1;
        bool needs_grad = false;
    };

    int last() const { return static_cast<int>(nodes_.size()) - 1; }

    std::vector<Node> nodes_;
};

}  // namespace msmg
