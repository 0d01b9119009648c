#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "anf/error.hpp"

namespace anf {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }
};

}  // namespace detail

/// Dense row-major tensor with optional gradient storage.
///
/// A Tensor is a cheap handle onto shared node storage; copies alias the
/// same data, clone() deep-copies. Feature tensors use the [N, C, H, W]
/// layout. The scalar type is a template parameter: runs train in float,
/// numeric tests instantiate double for tight tolerances.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return full(std::move(shape), S(0));
    }

    static Tensor full(Shape shape, S value) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(static_cast<std::size_t>(shape_numel(t.node_->shape)), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor scalar(S value) { return from_data({1}, {value}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    S* data() { return node_->data.data(); }
    const S* data() const { return node_->data.data(); }
    std::vector<S>& vec() { return node_->data; }
    const std::vector<S>& vec() const { return node_->data; }

    S item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool value = true) {
        node_->requires_grad = value;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::vector<S>& grad() {
        if (!has_grad()) throw ContractError("gradient not populated for tensor " + shape_str(shape()));
        return node_->grad;
    }
    const std::vector<S>& grad() const {
        if (!has_grad()) throw ContractError("gradient not populated for tensor " + shape_str(shape()));
        return node_->grad;
    }

    void zero_grad() {
        if (node_) node_->grad.clear();
    }

    /// Deep copy of the values; the copy is a fresh leaf with no gradient.
    Tensor clone() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node<S>>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        return t;
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(node_->data.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(node_->data[i]);
        return Tensor<T>::from_data(node_->shape, std::move(out));
    }

    std::shared_ptr<detail::Node<S>> node() const { return node_; }

private:
    std::shared_ptr<detail::Node<S>> node_;
};

/// Ordered record of the differentiable ops executed under its scope.
///
/// Ops append one entry each as they run, so entries are already in
/// topological order; backward() replays them exactly once in reverse and
/// accumulates gradients additively, which makes fan-out sum naturally.
/// A tape is owned by one logical thread per forward/backward pass.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(std::function<void()> backward_fn) {
        entries_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return entries_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The loss
    /// must be a scalar produced while this tape was active; a second call
    /// without a fresh forward pass is an error.
    void backward(const Tensor<S>& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw ContractError("backward requires a scalar loss tensor");
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward on a loss that is not attached to this tape");
        }
        if (consumed_) {
            throw ContractError("backward called twice on the same tape");
        }
        consumed_ = true;
        auto node = loss.node();
        node->ensure_grad();
        node->grad[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

    /// RAII activation: ops executed inside the scope record onto the tape.
    class Scope {
    public:
        explicit Scope(Tape& tape) : prev_(current_) { current_ = &tape; }
        ~Scope() { current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    static thread_local Tape* current_;
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

namespace detail {

/// True when an op should record a backward entry for these inputs.
template <typename S>
inline bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
    if (Tape<S>::current() == nullptr) return false;
    for (const Tensor<S>* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

}  // namespace anf
