#pragma once

// Dense f64 tensors with a dynamically recorded reverse-mode tape.
//
// Every op output keeps shared handles to its inputs plus a closure that
// pushes its gradient back into them. Nodes carry a creation sequence number;
// since an op's output is always created after its inputs, sorting reachable
// nodes by descending sequence yields a valid reverse topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace asw {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// Multiply-accumulate and elementwise tallies gathered while ops run. Used to
// cross-check the analytic FLOP estimator against what forward passes really do.
struct OpCounter {
    std::uint64_t macs = 0;
    std::uint64_t elementwise = 0;
    std::uint64_t transcendental = 0;
    bool enabled = false;
};

inline OpCounter& op_counter() {
    thread_local OpCounter counter;
    return counter;
}

inline void count_macs(std::uint64_t n) {
    if (op_counter().enabled) op_counter().macs += n;
}
inline void count_elementwise(std::uint64_t n) {
    if (op_counter().enabled) op_counter().elementwise += n;
}
inline void count_transcendental(std::uint64_t n) {
    if (op_counter().enabled) op_counter().transcendental += n;
}

class CountingScope {
public:
    CountingScope() : saved_(op_counter()) { op_counter() = OpCounter{0, 0, 0, true}; }
    ~CountingScope() { op_counter() = saved_; }
    CountingScope(const CountingScope&) = delete;
    CountingScope& operator=(const CountingScope&) = delete;
    OpCounter snapshot() const { return op_counter(); }

private:
    OpCounter saved_;
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        for (std::size_t d : shape)
            if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        node_->seq = next_seq();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node().shape; }
    std::size_t dim(std::size_t i) const {
        if (i >= shape().size()) throw ShapeError("dimension index out of range for " + shape_str(shape()));
        return shape()[i];
    }
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const { return node().data.size(); }

    std::span<const double> data() const { return node().data; }
    // Mutable access for leaves (initialisers, optimisers, tests).
    std::span<double> mutable_data() { return node().data; }
    const std::vector<double>& vec() const& { return node().data; }
    std::vector<double> vec() && { return node().data; }  // copy, so loops over temporaries stay valid

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node().data[0];
    }
    double operator[](std::size_t i) const { return node().data.at(i); }

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (!node().is_leaf()) throw GraphError("requires_grad can only be toggled on leaf tensors");
        node().requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node().grad.size() == node().data.size(); }
    std::span<const double> grad() const {
        if (!has_grad()) node_->ensure_grad();
        return node().grad;
    }
    void zero_grad() {
        if (has_grad()) std::fill(node().grad.begin(), node().grad.end(), 0.0);
    }

    // Shares no history with the original; data is copied.
    Tensor detach() const { return Tensor(shape(), node().data, false); }
    Tensor clone() const { return detach(); }

    void backward() const;

    const NodePtr& node_ptr() const { return node_; }
    static Tensor from_node(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    Node& node() const {
        if (!node_) throw GraphError("use of undefined tensor");
        return *node_;
    }
    NodePtr node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
}

// Wraps an op result. When grad mode is on and any input is tracked, the node
// records its inputs and backward closure; otherwise it is a plain constant.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                          std::function<void(Node&)> backward_fn) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data), false);
    bool track = false;
    if (grad_mode_flag())
        for (const Tensor& t : inputs) track = track || t.requires_grad();
    if (track) {
        Node& n = *out.node_ptr();
        n.requires_grad = true;
        n.op = op;
        n.inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
        n.backward_fn = std::move(backward_fn);
    }
    return out;
}

// Gradient buffer of input i, or nullptr when that input is untracked.
inline std::vector<double>* input_grad(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.ensure_grad() : nullptr;
}

}  // namespace detail

inline void Tensor::backward() const {
    Node& root = node();
    if (root.data.size() != 1)
        throw GraphError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
    if (!root.requires_grad) throw GraphError("backward() on a loss that is detached from every parameter");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const NodePtr& in : n->inputs)
            if (in->requires_grad) stack.push_back(in.get());
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

    // Interior gradients are per-call scratch; only leaves accumulate.
    for (Node* n : order)
        if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    root.ensure_grad()[0] += 1.0;

    for (Node* n : order)
        if (!n->is_leaf()) n->backward_fn(*n);
}

}  // namespace asw
