#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "droppatch/random.hpp"
#include "droppatch/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the tape when
// any input requires a gradient and recording is enabled.
namespace droppatch::nd {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Matrix product over the last two axes.
///  - [..., m, k] x [k, n]         -> [..., m, n]   (b shared across the batch)
///  - [..., m, k] x [..., k, n]    -> [..., m, n]   (identical batch axes)
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax_lastdim(const Tensor& x);

/// Normalizes over the last axis with population variance and eps inside the
/// square root, then applies gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean squared error over the flat element indices in `selector`. Elements
/// outside the selector take no part in the value or the gradient.
Tensor mse(const Tensor& pred, const Tensor& target, std::span<const std::size_t> selector);

/// Mean squared error over every element.
Tensor mse(const Tensor& pred, const Tensor& target);

/// Rows of a 2-D tensor, in the given order: [R, C] -> [indices.size(), C].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

}  // namespace droppatch::nd
