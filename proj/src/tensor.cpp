#include "csl/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "csl/error.hpp"

namespace csl {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    node_ = std::make_shared<detail::TensorNode>();
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    node_->needs_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->needs_grad = requires_grad;
}

double Tensor::value() const {
    if (numel() != 1) throw DimensionError("value() requires a scalar tensor, got " + shape_str(shape()));
    return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = v || !node_->parents.empty();
    return *this;
}

std::span<double> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (numel() != 1) throw DimensionError("backward() requires a scalar loss, got " + shape_str(shape()));
    if (!node_->needs_grad) return;

    // Iterative post-order DFS over parents; graphs can be deep.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* n;
        std::size_t next_parent;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            detail::TensorNode* p = f.n->parents[f.next_parent++].get();
            if (p->needs_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

Tensor Tensor::detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    t.node_->needs_grad = node_->requires_grad;
    return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

bool grad_enabled() { return g_grad_enabled; }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.needs_grad();
        if (needs) {
            node->needs_grad = true;
            node->parents.reserve(parents.size());
            for (const auto& p : parents) node->parents.push_back(p.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor::wrap(std::move(node));
}

}  // namespace detail

}  // namespace csl
