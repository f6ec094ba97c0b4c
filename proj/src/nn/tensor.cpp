// SPDX-License-Identifier: Apache-2.0
#include "obidiff/nn/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace obidiff::nn {
namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size())
        throw std::invalid_argument("tensor: value count does not match shape " + to_string(shape));
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Var<T>(std::move(node));
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> values) {
    Var v = constant(std::move(shape), std::move(values));
    v.node_->requires_grad = true;
    return v;
}

template <typename T>
Var<T> make_result(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents) {
    auto node = std::make_shared<Node<T>>();
    node->value.assign(numel(shape), T(0));
    node->shape = std::move(shape);
    if (t_grad_enabled) {
        for (const auto& p : parents) {
            if (p && p->requires_grad) {
                node->requires_grad = true;
                break;
            }
        }
        if (node->requires_grad) node->parents = std::move(parents);
    }
    return Var<T>(std::move(node));
}

template <typename T>
void backward(const Var<T>& root) {
    if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.raw(), 0}};
    seen.insert(root.raw());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.raw()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward();
    }
}

template class Var<float>;
template class Var<double>;
template Var<float> make_result(Shape, std::vector<std::shared_ptr<Node<float>>>);
template Var<double> make_result(Shape, std::vector<std::shared_ptr<Node<double>>>);
template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace obidiff::nn
