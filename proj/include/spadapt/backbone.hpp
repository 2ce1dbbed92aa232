#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "spadapt/ops.hpp"
#include "spadapt/optim.hpp"

namespace spadapt {

/// Architecture descriptor; two backbones with equal descriptors have
/// identically named and shaped parameters.
struct BackboneArch {
  std::size_t input_channels = 3;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t convs_per_block = 2;
  std::size_t num_classes = 10;
  DType dtype = DType::f32;

  nlohmann::json to_json() const;
  static BackboneArch from_json(const nlohmann::json& j);
  bool operator==(const BackboneArch&) const = default;
};

struct ConvBnLayer {
  Tensor weight;  // [F, C, 3, 3]
  Tensor bias;    // [F]
  Tensor gamma;   // [F]
  Tensor beta;    // [F]
  BatchNormState bn;
};

/// Checkpoint container: named tensors plus a JSON descriptor.
///
/// File layout: "SPCK" | u8 version=1 | u64-length descriptor text |
/// u32 tensor count | per tensor: u64-length name, SPAT tensor record.
struct Checkpoint {
  nlohmann::json descriptor;
  std::vector<NamedTensor> tensors;

  const Tensor& find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Small VGG-style classifier: blocks of [conv3x3 -> batchnorm -> relu] x
/// convs_per_block followed by 2x2 max pooling, then global average pooling
/// and a dense head.
///
/// Block index b is a valid view-pool split point: CNN1 runs blocks 0..b,
/// CNN2 runs the remaining blocks and the classifier.
class Backbone {
 public:
  Backbone(BackboneArch arch, std::uint64_t seed);

  Backbone(Backbone&&) = default;
  Backbone& operator=(Backbone&&) = default;
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  /// Deep copy; the clone shares no storage with this backbone.
  Backbone clone() const;

  const BackboneArch& arch() const { return arch_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  std::size_t default_pool_block() const { return blocks_.size() - 1; }

  Tensor forward(Graph& g, const Tensor& x, Mode mode);
  /// CNN1: blocks 0..pool_block inclusive.
  Tensor forward_until(Graph& g, const Tensor& x, Mode mode, std::size_t pool_block);
  /// CNN1 over several views at once. The views travel as one batch, so
  /// train-mode batch statistics (and the running statistics eval uses) cover
  /// every view; one view is the same as forward_until.
  std::vector<Tensor> forward_until_views(Graph& g, const std::vector<Tensor>& views, Mode mode,
                                          std::size_t pool_block);
  /// CNN2: blocks after pool_block, then the classifier.
  Tensor forward_from(Graph& g, const Tensor& h, Mode mode, std::size_t pool_block);
  /// Input of the dense head (pooled features), [N, widths.back()].
  Tensor features(Graph& g, const Tensor& x, Mode mode);
  Tensor head(Graph& g, const Tensor& features);
  /// First conv of the network, before bias: the raw filter response.
  Tensor first_layer_response(Graph& g, const Tensor& x);

  /// Trainable parameters, in a stable order.
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> head_parameters() const;
  /// Parameters plus batch-norm running statistics.
  std::vector<NamedTensor> state() const;
  std::size_t parameter_count() const;

  ConvBnLayer& first_layer() { return blocks_.front().front(); }
  const ConvBnLayer& first_layer() const { return blocks_.front().front(); }

  Checkpoint to_checkpoint(const nlohmann::json& metadata = {}) const;
  static Backbone from_checkpoint(const Checkpoint& ckpt);
  /// Overwrites every tensor from `ckpt`; throws when the descriptor's
  /// architecture differs from this backbone's.
  void load_state(const Checkpoint& ckpt);

 private:
  friend Backbone replace_head(const Backbone&, std::size_t, std::uint64_t);
  friend Backbone inflate_first_layer(const Backbone&, std::size_t);

  Backbone() = default;
  void run_block(Graph& g, Tensor& h, Mode mode, std::size_t b, std::size_t segments = 1);
  void init_head(std::uint64_t seed);

  BackboneArch arch_;
  std::vector<std::vector<ConvBnLayer>> blocks_;
  Tensor head_weight_;  // [K, widths.back()]
  Tensor head_bias_;    // [K]
};

/// Copy of `net` with a freshly initialized dense head for `num_classes`.
Backbone replace_head(const Backbone& net, std::size_t num_classes, std::uint64_t seed);

/// Copy of a 3-channel `net` whose first conv takes k channels: every input
/// slice of each filter is that filter's mean over the original 3 channels.
/// Bias and all other parameters are copied unchanged; no 3/k rescaling.
Backbone inflate_first_layer(const Backbone& net, std::size_t k);

}  // namespace spadapt
