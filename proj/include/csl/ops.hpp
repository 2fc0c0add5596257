#ifndef CSL_OPS_HPP
#define CSL_OPS_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "csl/tensor.hpp"

// Differentiable operations over Tensor. Every op returns a fresh node wired
// into the reverse-mode graph (unless gradients are disabled or no input
// needs them). Shapes are validated up front; mismatches throw DimensionError.

namespace csl {

// ---- elementwise arithmetic (same shape, or one scalar operand) ----
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(const Tensor& a, double b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);
Tensor operator/(const Tensor& a, double b);
Tensor operator-(const Tensor& a);

// Sum of several same-shape tensors as one n-ary node (keeps graphs shallow).
Tensor add_n(std::span<const Tensor> terms);

// ---- unary math ----
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// sqrt with a guarded derivative at 0 (value is exact, slope capped).
Tensor sqrt(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor row_sum(const Tensor& x);  // [n,m] -> [n]

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten_rows(const Tensor& x);  // [N,...] -> [N, rest]

// ---- indexing ----
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor take_per_row(const Tensor& x, std::span<const std::size_t> cols);  // [n,K],[n] -> [n]

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T, [m,k]x[n,k] -> [m,n]
// y = x * w^T + b with w stored [out,in].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Scale row i of a [n,m] tensor by v[i]; differentiable in both.
Tensor mul_rowwise(const Tensor& a, const Tensor& v);
// Subtract a [1,m] (or [m]) row vector from every row of a [n,m] tensor.
Tensor sub_rowvec(const Tensor& a, const Tensor& v);

// ---- rows of probabilities ----
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// ---- convolutional stack ----
// Cross-correlation of [N,C,H,W] input with [F,C,kh,kw] kernels.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
// Per-channel bias over an [N,F,H,W] activation.
Tensor bias_nchw(const Tensor& x, const Tensor& bias);
// 2x2 max pooling with stride 2; gradient routes to each window's argmax.
Tensor max_pool2d(const Tensor& x);

// ---- loss building blocks ----
// Elementwise Huber value of (x - target), target held constant.
Tensor huber_to_const(const Tensor& x, std::span<const double> target, double delta);

}  // namespace csl

#endif
