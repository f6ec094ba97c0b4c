// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace obidiff::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Graph node of the reverse-mode tape. Values are computed eagerly; `backward`
/// reads this node's gradient and accumulates into the parents'.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;

    T* grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

/// Shared handle to a tensor on the tape. Copies alias the same storage.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Shape shape, std::vector<T> values);
    static Var zeros(Shape shape);
    static Var parameter(Shape shape, std::vector<T> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    std::span<const T> grad() const { return node_->grad; }
    T item() const { return node_->value.at(0); }

    void zero_grad() { node_->grad.clear(); }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node<T>* raw() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Whether new ops record backward closures. Thread-local.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Runs reverse accumulation from a scalar output.
template <typename T>
void backward(const Var<T>& root);

/// Creates the result node for an op. Parents are attached only when gradient
/// recording is enabled and some parent requires a gradient.
template <typename T>
Var<T> make_result(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents);

}  // namespace obidiff::nn
