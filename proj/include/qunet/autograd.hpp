#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "qunet/tensor.hpp"

namespace qunet {

// Tape node. Children own their parents via shared_ptr; the backward closure
// captures raw pointers only, so graphs are acyclic and free themselves when
// the loss handle is dropped.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void()> backprop;

    bool has_grad() const { return !grad.data.empty(); }
    Tensor<T>& ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
        return grad;
    }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

inline bool& grad_mode_flag() {
    static thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <class T>
Var<T> make_const(Tensor<T> value) {
    return make_leaf<T>(std::move(value), false);
}

// True when the op being built should record a tape entry.
template <class T>
bool tape_active(const std::vector<Var<T>>& parents) {
    if (!grad_mode_flag()) return false;
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

template <class T>
void accumulate(Node<T>* n, const Tensor<T>& g) {
    Tensor<T>& dst = n->ensure_grad();
    const T* s = g.ptr();
    T* d = dst.ptr();
    for (int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
}

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once, in reverse topological order; gradients accumulate into node.grad.
template <class T>
void backward(const Var<T>& loss) {
    if (!loss) throw std::invalid_argument("backward: null loss");
    if (loss->value.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    shape_str(loss->value));

    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    struct Frame {
        Node<T>* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            Node<T>* p = f.n->parents[f.next_parent++].get();
            if (p && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    loss->ensure_grad().data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->requires_grad) n->ensure_grad();
        if (n->backprop) n->backprop();
    }
}

template <class T>
void zero_grad(const Var<T>& v) {
    if (v) v->grad = Tensor<T>();
}

}  // namespace qunet
