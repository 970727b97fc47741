#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "hcct/error.hpp"

namespace hcct {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Thread-local switch for recording the autodiff graph. Evaluation paths
// disable it so forward passes allocate no graph state.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

} // namespace detail

// Dense N-dimensional array with optional reverse-mode gradient tracking.
// Value-semantics handle: copies share the underlying node, so a parameter
// updated through one handle is visible through all of them.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<T>>();
        t.node_->value.assign(numel(shape), T(0));
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T fill) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.node_->value) v = fill;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (numel(shape) != data.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({}, {v}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node()->shape; }
    std::size_t rank() const { return node()->shape.size(); }
    std::size_t size() const { return node()->value.size(); }
    std::size_t extent(std::size_t axis) const { return node()->shape.at(axis); }

    const std::vector<T>& data() const { return node()->value; }
    // In-place mutation (optimizer updates, initialization). Any recorded
    // graph referencing this tensor sees the new values.
    std::vector<T>& raw_data() { return node()->value; }

    T item() const {
        if (size() != 1) {
            throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
        }
        return node()->value[0];
    }

    bool requires_grad() const { return node()->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        node()->requires_grad = on;
        if (on) node()->ensure_grad();
        return *this;
    }

    bool has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }
    const std::vector<T>& grad() const {
        if (!has_grad()) {
            throw ContractError("grad: no gradient recorded for this tensor");
        }
        return node_->grad;
    }
    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // New leaf sharing nothing with the recorded graph; cuts gradient flow.
    Tensor detach() const {
        return from_data(shape(), data());
    }

    // Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    // calls; interior gradients are scratch and reset on every sweep.
    void backward() const {
        if (!defined() || size() != 1) {
            throw ContractError("backward: loss must be a defined scalar tensor");
        }
        std::vector<detail::Node<T>*> order;
        topo_sort(order);
        for (detail::Node<T>* n : order) {
            if (n->backward_fn) { // interior: scratch grad
                n->grad.assign(n->value.size(), T(0));
            } else if (n->requires_grad) {
                n->ensure_grad();
            }
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node<T>* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

    std::shared_ptr<detail::Node<T>> node_ptr() const { return node_; }

    static Tensor adopt(std::shared_ptr<detail::Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    detail::Node<T>* node() const {
        if (!node_) throw ContractError("tensor: used before initialization");
        return node_.get();
    }

    void topo_sort(std::vector<detail::Node<T>*>& order) const {
        std::unordered_set<detail::Node<T>*> seen;
        // Iterative post-order DFS; model graphs are deep enough that
        // recursion is not worth the stack risk.
        std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next_child] = stack.back();
            if (next_child < n->parents.size()) {
                detail::Node<T>* child = n->parents[next_child++].get();
                if (seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<detail::Node<T>> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

} // namespace hcct
