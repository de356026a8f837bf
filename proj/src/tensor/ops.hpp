#pragma once

#include "tensor/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace bimors {

inline constexpr float kLayerNormEps = 1e-5f;

// [..., m, k] x [..., k, n]; leading dimensions must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two dimensions.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, float factor);
// x[..., n] + row[n] (row may also be [1, n]).
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor relu(const Tensor& x);
// x * sigmoid(1.702 x)
Tensor gelu_quick(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);
// Sets entries strictly above the diagonal of the trailing [L, L] block to -inf.
Tensor causal_mask(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = kLayerNormEps);

Tensor sum(const Tensor& x);
// [N, d] -> [1, d]
Tensor mean_rows(const Tensor& x);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
// [L, h*dh] -> [h, L, dh] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);
// Divides each last-dim row by its L2 norm (floored at 1e-12).
Tensor l2_normalize_rows(const Tensor& x);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

// Mean over the batch of -log softmax(logits[b])[labels[b]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

} // namespace bimors
