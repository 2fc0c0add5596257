#ifndef CSL_TENSOR_HPP
#define CSL_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace csl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first backward touches it
    bool requires_grad = false;  // leaf marker: optimizers update these
    bool needs_grad = false;     // true if this node or any input wants gradients

    // Reverse-mode graph: inputs this value was computed from, and a closure
    // that scatters this node's grad into theirs. Rebuilt every forward pass.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major tensor of 64-bit reals participating in a define-by-run
// reverse-mode differentiation graph. Copying a Tensor copies the handle,
// not the buffer (clone() for a deep copy).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->numel(); }

    std::span<const double> data() const { return node_->data; }
    // Direct mutation is for leaves (parameter updates, data loading); it
    // never touches the graph.
    std::span<double> mutable_data() { return node_->data; }

    double value() const;  // scalar tensors only

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    bool needs_grad() const { return node_->needs_grad; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad();
    void zero_grad();

    // Reverse-mode sweep from a scalar output. Accumulates into .grad of
    // every reachable node whose needs_grad is set.
    void backward() const;

    // Same values, detached from the graph (constant from here on).
    Tensor detach() const;
    // Deep copy as a fresh leaf with the same requires_grad flag.
    Tensor clone() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// While a guard is alive, newly built ops record no graph (values only).
// Used for evaluation passes and frozen-extractor feature precomputation.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {
bool grad_enabled();
// Shared factory for ops: wires parents and the backward closure only when
// gradients are both requested and enabled.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn);
}  // namespace detail

}  // namespace csl

#endif
