#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tlvm/tensor.h"

// Differentiable tensor ops. Every op is a pure function of its inputs and
// records a backward rule on the active tape when any input requires grad.
// Shapes are strict: the only broadcast is a trailing-axis parameter vector
// (add_bias, layer_norm's gamma/beta).
namespace tlvm::ops {

using Mask = std::vector<std::uint8_t>;

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x[... x n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// Sum of all elements as a rank-0 tensor.
Tensor sum(const Tensor& x);

// Along the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// tanh approximation.
Tensor gelu(const Tensor& x);

// Mean negative log-likelihood over positions where mask != 0.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

// Rows of table[V x d] selected by ids -> [n x d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);
// Stacks 2-D tensors of equal width.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);

struct AttentionOptions {
  std::size_t n_heads = 1;
  bool causal = false;
  // Absolute position of query row 0; query i may see keys j <= q_offset + i.
  std::size_t q_offset = 0;
};

// Multi-head scaled dot-product attention over pre-projected q[Lq x d],
// k[Lk x d], v[Lk x d] -> [Lq x d]. Heads are contiguous column blocks.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionOptions& options);

}  // namespace tlvm::ops
