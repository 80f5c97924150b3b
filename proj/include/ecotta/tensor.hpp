#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ecotta/errors.hpp"

namespace ecotta {

using Shape = std::vector<std::int64_t>;

template <typename S>
using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

//==========================================================================
// Grad mode
//==========================================================================

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

//==========================================================================
// Activation ledger
//
// Counts bytes of forward tensors that must be retained to compute weight
// gradients: the inputs of trainable weight-bearing layers (linear, conv,
// BN affine), at numel x element-size. Saves made only for input-gradient
// chain rule (ReLU masks, normalized copies of frozen BN inputs) are not
// counted. Each trainable layer is counted at most once per pass, keyed by
// its weight buffer, so re-walking a subgraph does not double-bill.
//==========================================================================

class ActivationLedger {
public:
    struct Entry {
        const void* layer_key;
        const char* op;
        std::size_t bytes;
    };

    void begin_pass() {
        entries_.clear();
        seen_.clear();
        total_ = 0;
    }

    void record(const void* layer_key, const char* op, std::size_t bytes) {
        if (!seen_.insert(layer_key).second) return;
        entries_.push_back(Entry{layer_key, op, bytes});
        total_ += bytes;
    }

    std::size_t total_bytes() const { return total_; }
    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
    std::unordered_set<const void*> seen_;
    std::size_t total_ = 0;
};

// One ledger per thread; independent runs on separate threads do not share it.
inline ActivationLedger& ledger() {
    thread_local ActivationLedger inst;
    return inst;
}

inline std::size_t ledger_bytes() { return ledger().total_bytes(); }

//==========================================================================
// Tensor and tape
//==========================================================================

template <typename S>
class Tensor;

namespace detail {

template <typename S>
struct TensorImpl;

// A tape node. `inputs` are the tensors gradient may propagate into;
// `saved` holds inputs retained for weight gradients (the ledger-visible
// set). Values needed only for input gradients are captured inside the
// backward closure.
template <typename S>
struct Node {
    const char* op = "?";
    std::vector<Tensor<S>> inputs;
    std::vector<Tensor<S>> saved;
    std::function<void(const Buffer<S>&)> backward;
    std::weak_ptr<TensorImpl<S>> out;
    bool consumed = false;
};

template <typename S>
struct TensorImpl {
    Shape shape;
    Buffer<S> data;
    Buffer<S> grad;  // persistent gradient for leaves; empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<Node<S>> node;  // producer; null for leaves

    // Transient gradient used while a backward sweep is in flight.
    Buffer<S> flow;
    bool flow_set = false;
};

}  // namespace detail

// Dense tensor handle with shared storage. Copies are shallow; clone()
// copies the data. Scalars are rank-0 tensors with numel 1.
template <typename S>
class Tensor {
public:
    using Impl = detail::TensorImpl<S>;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = Buffer<S>::Zero(numel_of(t.impl_->shape));
        return t;
    }

    static Tensor full(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        t.impl_->data.setConstant(value);
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<S> values) {
        return from_vector(std::move(shape), std::vector<S>(values));
    }

    static Tensor from_vector(Shape shape, const std::vector<S>& values) {
        Tensor t = zeros(std::move(shape));
        if (static_cast<std::int64_t>(values.size()) != t.numel())
            throw DimensionError("tensor literal size " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(t.shape()));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.impl_->data[i] = values[static_cast<std::size_t>(i)];
        return t;
    }

    static Tensor from_buffer(Shape shape, Buffer<S> buf) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        if (buf.size() != numel_of(t.impl_->shape))
            throw DimensionError("buffer size does not match shape " + shape_str(t.impl_->shape));
        t.impl_->data = std::move(buf);
        return t;
    }

    static Tensor scalar(S value) { return full({}, value); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t numel() const { return impl_->data.size(); }

    Buffer<S>& data() { return impl_->data; }
    const Buffer<S>& data() const { return impl_->data; }

    S item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_->grad.size() > 0; }
    Buffer<S>& grad() { return impl_->grad; }
    const Buffer<S>& grad() const { return impl_->grad; }

    // An independent copy of the values, cut off from the graph.
    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    Tensor clone() const {
        Tensor t = zeros(impl_->shape);
        t.impl_->data = impl_->data;
        return t;
    }

    std::shared_ptr<detail::Node<S>> node() const { return impl_->node; }
    Impl* impl() const { return impl_.get(); }
    std::shared_ptr<Impl> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

//==========================================================================
// Node construction helpers (used by ops.hpp)
//==========================================================================

namespace detail {

template <typename S>
bool any_requires_grad(const std::vector<Tensor<S>>& ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Creates the op output; attaches a node when grad is enabled and some
// input requires it. The caller fills node->backward afterwards (so the
// closure can capture the node's own saved tensors).
template <typename S>
Tensor<S> op_output(Shape shape, Buffer<S> value, const char* op, std::vector<Tensor<S>> inputs,
                    std::shared_ptr<Node<S>>* node_out) {
    Tensor<S> out = Tensor<S>::from_buffer(std::move(shape), std::move(value));
    *node_out = nullptr;
    if (grad_enabled() && any_requires_grad(inputs)) {
        auto node = std::make_shared<Node<S>>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->out = out.impl_ptr();
        out.impl()->node = node;
        out.set_requires_grad(true);
        *node_out = node;
    }
    return out;
}

// Accumulates a gradient expression into a tensor, respecting leaf/non-leaf
// storage. Frozen tensors receive nothing.
template <typename S, typename Expr>
void accumulate(const Tensor<S>& t, const Expr& e) {
    auto* impl = t.impl();
    if (!impl->requires_grad) return;
    if (impl->node) {
        if (!impl->flow_set) {
            impl->flow = e;
            impl->flow_set = true;
        } else {
            impl->flow += e;
        }
    } else {
        if (impl->grad.size() == 0) impl->grad = Buffer<S>::Zero(impl->data.size());
        impl->grad += e;
    }
}

}  // namespace detail

//==========================================================================
// Reverse pass
//==========================================================================

// Accumulates gradients of `loss` into every reachable leaf that requires
// grad. A graph may be consumed only once. Backward on a tensor with no
// graph (e.g. every parameter frozen) is a no-op.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
        throw DimensionError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root) return;

    // Iterative DFS postorder; deterministic given graph structure.
    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    struct Frame {
        detail::Node<S>* node;
        std::size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.node->consumed)
            throw LifecycleError(std::string("backward through already-consumed graph at op ") + f.node->op);
        if (f.next_input < f.node->inputs.size()) {
            const auto& in = f.node->inputs[f.next_input++];
            auto child = in.defined() ? in.node() : nullptr;
            if (child && seen.insert(child.get()).second) stack.push_back({child.get(), 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.impl()->flow = Buffer<S>::Constant(1, S(1));
    loss.impl()->flow_set = true;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<S>* node = *it;
        auto out_impl = node->out.lock();
        if (!out_impl) continue;
        if (out_impl->flow_set) {
            node->backward(out_impl->flow);
            out_impl->flow.resize(0);
            out_impl->flow_set = false;
        }
        node->consumed = true;
        node->backward = nullptr;  // release captured buffers
        node->saved.clear();
    }
}

//==========================================================================
// Optimizer primitives
//==========================================================================

// Plain SGD on trainable parameters; frozen parameters are untouched even
// if a grad buffer is present.
template <typename S>
void sgd_step(const std::vector<Tensor<S>>& params, S lr) {
    for (const auto& p : params) {
        if (!p.defined() || !p.requires_grad() || !p.has_grad()) continue;
        p.impl()->data -= lr * p.impl()->grad;
    }
}

template <typename S>
void zero_grad(const std::vector<Tensor<S>>& params) {
    for (const auto& p : params) {
        if (!p.defined()) continue;
        p.impl()->grad.resize(0);
    }
}

}  // namespace ecotta
