#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mamlab/errors.hpp"

namespace mamlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
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

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until an adjoint arrives
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline std::uint64_t next_seq() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

struct GradMode {
    bool enabled = true;
    std::uint64_t recorded = 0; // nodes that carry a backward closure
};

inline GradMode& grad_mode() {
    thread_local GradMode mode;
    return mode;
}

} // namespace detail

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode().enabled) { detail::grad_mode().enabled = false; }
    ~NoGradGuard() { detail::grad_mode().enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode().enabled; }

// Number of differentiable nodes ever recorded on this thread.
inline std::uint64_t recorded_node_count() { return detail::grad_mode().recorded; }

// Dense row-major array of doubles, optionally a node in a reverse-mode graph. Copies share
// the underlying node (handle semantics, like a shared pointer).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        node->seq = detail::next_seq();
        return Tensor(std::move(node));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false) {
        return from({rows, cols}, std::move(values), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }
    bool is_scalar() const { return rank() == 0; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    // A new leaf holding a copy of the values; never part of any graph.
    Tensor detach() const { return from(shape(), node_->value, false); }

    std::uint64_t seq() const { return node_->seq; }
    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    // Creates the output of an operation. When recording is on and any input needs a gradient,
    // the output is linked to its inputs and carries the adjoint closure.
    static Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                              std::function<void(detail::Node&)> backward) {
        return make_result(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(backward));
    }

    static Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                              std::function<void(detail::Node&)> backward) {
        Tensor out = from(std::move(shape), std::move(values), false);
        if (!grad_enabled()) return out;
        bool any = false;
        for (const Tensor& t : inputs) any = any || t.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        for (const Tensor& t : inputs) out.node_->parents.push_back(t.node_);
        out.node_->backward = std::move(backward);
        ++detail::grad_mode().recorded;
        return out;
    }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

// Ordered record of the nodes reachable from a root, in an order where every node precedes
// the nodes that consumed it. Replaying it backwards visits each node exactly once.
class GradTape {
public:
    explicit GradTape(const Tensor& root) {
        // Iterative post-order DFS over requires_grad ancestors.
        std::vector<std::pair<detail::Node*, std::size_t>> frames;
        frames.emplace_back(root.node(), 0);
        marked_.insert(root.node());
        while (!frames.empty()) {
            auto& [node, next] = frames.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && marked_.insert(parent).second) frames.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                frames.pop_back();
            }
        }
    }

    const std::vector<detail::Node*>& order() const { return order_; }

    void replay() {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* node = *it;
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

private:
    std::unordered_set<detail::Node*> marked_;
    std::vector<detail::Node*> order_;
};

// Seeds d(loss)/d(loss) = 1 and propagates adjoints to every reachable requires_grad tensor.
// Gradients accumulate; call zero_grad on parameters between steps.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ContractError("backward() needs a 0-dimensional loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;
    GradTape tape(loss);
    loss.node()->grad_buffer()[0] += 1.0;
    tape.replay();
}

} // namespace mamlab
