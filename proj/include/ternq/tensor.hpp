#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ternq {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
    if (shape.empty())
        throw std::invalid_argument("tensor shape must have at least one dimension");
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0)
            throw std::invalid_argument("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

template <class T>
class TapeT;

template <class T>
struct TensorPayload {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a backward pass deposits gradients
};

// Dense row-major tensor. Copies share storage (and the gradient buffer);
// use clone() for an independent deep copy. Participates in reverse-mode
// differentiation when attached to a TapeT, either via TapeT::watch (leaf
// parameters) or as the output of a recorded operation.
template <class T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape)
        : p_(std::make_shared<TensorPayload<T>>()) {
        int64_t n = numel_of(shape);
        p_->shape = std::move(shape);
        p_->values.assign(static_cast<size_t>(n), T(0));
    }

    TensorT(Shape shape, std::vector<T> values)
        : p_(std::make_shared<TensorPayload<T>>()) {
        int64_t n = numel_of(shape);
        if (static_cast<size_t>(n) != values.size())
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        p_->shape = std::move(shape);
        p_->values = std::move(values);
    }

    static TensorT scalar(T v) { return TensorT(Shape{1}, std::vector<T>{v}); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        for (auto& x : t.p_->values) x = v;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }

    const Shape& shape() const { return payload().shape; }
    int64_t dim(size_t i) const { return payload().shape.at(i); }
    size_t ndim() const { return payload().shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(payload().values.size()); }

    std::span<const T> values() const { return payload().values; }
    std::span<T> values() { return payload().values; }
    std::vector<T>& vec() { return payload().values; }
    const std::vector<T>& vec() const { return payload().values; }

    T item() const {
        if (numel() != 1) throw std::logic_error("item() requires a single-element tensor");
        return payload().values[0];
    }

    bool requires_grad() const { return requires_grad_; }

    bool has_grad() const { return defined() && !p_->grad.empty(); }
    std::span<const T> grad() const {
        if (!has_grad()) throw std::logic_error("tensor has no gradient");
        return p_->grad;
    }
    std::vector<T>& grad_buffer() {
        if (p_->grad.empty()) p_->grad.assign(p_->values.size(), T(0));
        return p_->grad;
    }
    void zero_grad() {
        if (defined()) p_->grad.clear();
    }

    TensorT clone() const {
        TensorT t;
        t.p_ = std::make_shared<TensorPayload<T>>(*p_);
        t.p_->grad.clear();
        return t;
    }

    // tape wiring
    TapeT<T>* tape() const { return tape_; }
    size_t node() const { return node_; }
    void attach(TapeT<T>* tape, size_t node) {
        tape_ = tape;
        node_ = node;
        requires_grad_ = tape != nullptr;
    }

    // shared handle to forward values, for capture in backward closures
    std::shared_ptr<const TensorPayload<T>> payload_ptr() const { return p_; }

private:
    const TensorPayload<T>& payload() const {
        if (!p_) throw std::logic_error("use of undefined tensor");
        return *p_;
    }
    TensorPayload<T>& payload() {
        if (!p_) throw std::logic_error("use of undefined tensor");
        return *p_;
    }

    std::shared_ptr<TensorPayload<T>> p_;
    bool requires_grad_ = false;
    TapeT<T>* tape_ = nullptr;
    size_t node_ = SIZE_MAX;

    template <class U>
    friend class TapeT;
};

// Integer-valued companion tensor for segmentation labels. Not differentiable.
struct IntTensor {
    Shape shape;
    std::vector<int32_t> values;

    IntTensor() = default;
    explicit IntTensor(Shape s) {
        int64_t n = numel_of(s);
        shape = std::move(s);
        values.assign(static_cast<size_t>(n), 0);
    }
    IntTensor(Shape s, std::vector<int32_t> v) {
        int64_t n = numel_of(s);
        if (static_cast<size_t>(n) != v.size())
            throw std::invalid_argument("label data length does not match shape");
        shape = std::move(s);
        values = std::move(v);
    }
    int64_t numel() const { return static_cast<int64_t>(values.size()); }
};

// Records one training step's operations in construction order, which is
// topological by definition: an operation's inputs always exist before it.
// backward() walks the list once in reverse.
template <class T>
class TapeT {
public:
    using GradSinks = std::vector<std::vector<T>*>;
    using BackwardFn = std::function<void(std::span<const T> out_grad, const GradSinks& input_grads)>;

    // Registers a leaf tensor (parameter or input that needs a gradient).
    // Gradients accumulate into the tensor's own grad buffer after backward().
    size_t watch(TensorT<T>& leaf) {
        if (leaf.tape() == this) return leaf.node();
        if (leaf.tape() != nullptr)
            throw std::logic_error("tensor is already attached to another tape");
        size_t id = new_node({}, leaf.numel(), nullptr);
        leaf.attach(this, id);
        leaves_.push_back(leaf);
        return id;
    }

    size_t record(std::vector<size_t> inputs, int64_t out_numel, BackwardFn fn) {
        for (size_t in : inputs) {
            if (in >= nodes_.size())
                throw std::logic_error("tape op references an unknown input node");
        }
        return new_node(std::move(inputs), out_numel, std::move(fn));
    }

    size_t size() const { return nodes_.size(); }

    // Backpropagates from a scalar root (seed gradient 1).
    void backward(const TensorT<T>& root) {
        if (root.numel() != 1)
            throw std::logic_error("backward() requires a scalar root; use backward(root, seed)");
        backward(root, std::vector<T>{T(1)});
    }

    void backward(const TensorT<T>& root, std::vector<T> seed) {
        if (root.tape() != this)
            throw std::logic_error("backward root is not recorded on this tape");
        if (static_cast<int64_t>(seed.size()) != root.numel())
            throw std::logic_error("backward seed shape does not match root");
        grads_.assign(nodes_.size(), {});
        grads_[root.node()] = std::move(seed);

        for (size_t id = root.node() + 1; id-- > 0;) {
            const Node& node = nodes_[id];
            if (!node.backward || grads_[id].empty()) continue;
            GradSinks sinks;
            sinks.reserve(node.inputs.size());
            for (size_t in : node.inputs) {
                if (grads_[in].empty())
                    grads_[in].assign(static_cast<size_t>(nodes_[in].numel), T(0));
                sinks.push_back(&grads_[in]);
            }
            node.backward(grads_[id], sinks);
        }

        for (auto& leaf : leaves_) {
            const auto& g = grads_[leaf.node()];
            if (g.empty()) continue;
            auto& dst = leaf.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
    }

    // Gradient of any node from the latest backward pass (empty if unreached).
    std::span<const T> grad_of(const TensorT<T>& t) const {
        if (t.tape() != this) throw std::logic_error("tensor is not on this tape");
        if (t.node() >= grads_.size()) throw std::logic_error("no backward pass has run");
        return grads_[t.node()];
    }

private:
    struct Node {
        std::vector<size_t> inputs;
        int64_t numel;
        BackwardFn backward;
    };

    size_t new_node(std::vector<size_t> inputs, int64_t numel, BackwardFn fn) {
        nodes_.push_back(Node{std::move(inputs), numel, std::move(fn)});
        return nodes_.size() - 1;
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::vector<TensorT<T>> leaves_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

#ifndef NDEBUG
// Debug-build invariant: forward ops on finite inputs produce finite outputs.
template <class T>
inline void debug_check_finite(const TensorT<T>& t, const char* op) {
    for (T v : t.values()) {
        if (!std::isfinite(v))
            throw std::logic_error(std::string("non-finite value produced by ") + op);
    }
}
#else
template <class T>
inline void debug_check_finite(const TensorT<T>&, const char*) {}
#endif

}  // namespace ternq
