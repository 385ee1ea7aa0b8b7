#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "cdmamba/errors.hpp"
#include "cdmamba/tensor.hpp"

// Reverse-mode tape. Ops append nodes in execution order; backward() walks the
// node list in reverse, so every node's gradient is complete before its own
// closure runs. Leaves have no closure; their gradients are read off afterward.

namespace cdmamba {

template <typename S>
class Tape {
public:
    // closure receives the tape and the finished gradient of its own node
    using Backward = std::function<void(Tape&, const TensorT<S>&)>;

    std::size_t leaf(TensorT<S> value) { return push(std::move(value), nullptr); }

    std::size_t push(TensorT<S> value, Backward backward) {
        nodes_.push_back(Node{std::move(value), TensorT<S>(), std::move(backward)});
        return nodes_.size() - 1;
    }

    const TensorT<S>& value(std::size_t id) const { return nodes_[id].value; }

    bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

    const TensorT<S>& grad(std::size_t id) const {
        if (!has_grad(id)) throw NumericError("tape: gradient never reached node");
        return nodes_[id].grad;
    }

    void accumulate(std::size_t id, const TensorT<S>& g) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) {
            n.grad = g;
            return;
        }
        require_same_shape(n.grad, g, "tape accumulate");
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    // seed the root with ones and run every reachable closure in reverse order
    void backward(std::size_t root) {
        accumulate(root, TensorT<S>::full(nodes_[root].value.shape(), S(1)));
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;
        Backward backward;
    };
    std::vector<Node> nodes_;
};

// lightweight handle pairing a tape with a node id
template <typename S>
struct VarT {
    Tape<S>* tape = nullptr;
    std::size_t id = 0;

    const TensorT<S>& value() const { return tape->value(id); }
};

using Var = VarT<double>;

template <typename S>
VarT<S> make_leaf(Tape<S>& t, TensorT<S> value) {
    return {&t, t.leaf(std::move(value))};
}

}  // namespace cdmamba
