#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "volab/rng.hpp"
#include "volab/tensor.hpp"

// Differentiable primitives. Binary elementwise ops accept either equal
// shapes or a right operand whose shape is a suffix of the left operand's
// shape (repetition over leading dimensions); there is no other broadcasting.
namespace volab::ops {

using Index3 = std::array<std::size_t, 3>;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// a [..., M, K] x b [K, N] -> [..., M, N]; or batched a [B, M, K] x b [B, K, N].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// Gathers sub-tensors along axis 0; indices may repeat.
Tensor take(const Tensor& a, std::span<const std::size_t> indices);

Tensor softmax(const Tensor& a, std::size_t axis);
// Softmax over the last axis with an additive mask of the same shape whose
// entries are 0 (allowed) or -infinity (blocked). Blocked entries get weight
// exactly 0; every row needs at least one allowed entry.
Tensor masked_softmax(const Tensor& a, const std::vector<double>& additive_mask);

// Normalizes over the last axis; gamma/beta have the size of that axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over one axis; that axis is removed from the shape.
Tensor mean_axis(const Tensor& a, std::size_t axis);

// Running statistics for batch_norm; updated in place in training mode.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// x [N, C, ...]: per-channel statistics over N and all trailing axes.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training, double momentum = 0.1, double eps = 1e-5);

// x [N, C, D, H, W], kernel [O, C, kd, kh, kw], optional bias [O].
Tensor conv3d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              Index3 stride, Index3 padding);

enum class PoolKind { Max, Avg };

// x [N, C, D, H, W]. Max pooling pads with -infinity; average pooling pads
// with zeros and always divides by the full window volume.
Tensor pool3d(const Tensor& x, PoolKind kind, Index3 window, Index3 stride,
              Index3 padding = {0, 0, 0});

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

}  // namespace volab::ops
