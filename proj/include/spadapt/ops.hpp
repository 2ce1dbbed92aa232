#pragma once

#include <span>
#include <vector>

#include "spadapt/graph.hpp"
#include "spadapt/tensor.hpp"

namespace spadapt {

enum class Mode { train, eval };

/// Convolution over NCHW input with an [F,C,kh,kw] kernel, via patch gather
/// and a matrix multiply per image.
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);

/// Running statistics owned by one batch-norm layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(std::size_t channels, DType dtype);
};

/// Per-channel normalization. Train mode uses batch statistics and folds them
/// into the running statistics (unbiased variance); eval mode uses the
/// running statistics and leaves them untouched.
///
/// With `segments` > 1 the batch is read as that many equal consecutive groups
/// (one per view); statistics still pool the whole batch, but are summed group
/// by group in an order-independent way, so permuting groups is bit-exact.
Tensor batchnorm2d(Graph& g, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, std::size_t segments = 1);

Tensor relu(Graph& g, const Tensor& input);

/// Max pooling; the gradient goes to the first maximum in row-major window order.
Tensor maxpool2d(Graph& g, const Tensor& input, int kernel, int stride);

/// y = x W^T + b with x [N,D], W [K,D], b [K].
Tensor dense(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(Graph& g, const Tensor& input);

/// Batch mean of -log softmax(logits)[label].
Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels);

Tensor mse(Graph& g, const Tensor& pred, const Tensor& target);

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double factor);
Tensor sum(Graph& g, const Tensor& a);
/// sum(a * weights) with `weights` treated as a constant.
Tensor weighted_sum(Graph& g, const Tensor& a, const Tensor& weights);

/// Concatenates NCHW tensors along the channel axis.
Tensor concat_channels(Graph& g, const std::vector<Tensor>& parts);
/// Stacks tensors along the leading (batch) axis.
Tensor concat_batch(Graph& g, const std::vector<Tensor>& parts);
/// Inverse of concat_batch for `parts` equal pieces.
std::vector<Tensor> split_batch(Graph& g, const Tensor& input, std::size_t parts);
/// Selects channels of an NCHW tensor in the given order.
Tensor gather_channels(Graph& g, const Tensor& input, std::span<const std::size_t> channels);

/// Elementwise max over equally shaped tensors. Ties resolve to the lowest
/// position in `parts`, both for the value source and the gradient route.
Tensor elementwise_max(Graph& g, const std::vector<Tensor>& parts);
Tensor elementwise_mean(Graph& g, const std::vector<Tensor>& parts);

}  // namespace spadapt
