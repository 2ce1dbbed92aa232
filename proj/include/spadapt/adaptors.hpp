#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spadapt/backbone.hpp"

namespace spadapt {

/// `identity` passes the k channels through unchanged; it is what plain
/// fine-tuning (k = 3), from-scratch training and the inflated network use.
enum class AdaptorKind { identity, linear, subset, multilayer, inflate, manual_merge };
enum class AdaptorInit { random, pca, autoencoder };

std::string to_string(AdaptorKind kind);
std::string to_string(AdaptorInit init);
AdaptorKind parse_adaptor_kind(const std::string& s);
AdaptorInit parse_adaptor_init(const std::string& s);

struct AdaptorSpec {
  AdaptorKind kind = AdaptorKind::linear;
  std::size_t k_in = 3;
  AdaptorInit init = AdaptorInit::random;
  std::uint64_t seed = 0;
  /// subset only; empty means "sample from seed".
  std::vector<std::size_t> indices{};
  /// manual_merge only; channel order (NUV, U, B, V, I).
  std::vector<double> gains{};

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  nlohmann::json to_json() const;
  static AdaptorSpec from_json(const nlohmann::json& j);
  bool operator==(const AdaptorSpec&) const = default;
};

/// Stack of [conv3x3 pad 1 -> batchnorm -> relu] layers closed by a 1x1 conv.
struct ConvStack {
  std::vector<ConvBnLayer> hidden;
  Tensor out_weight;  // [out, width, 1, 1]
  Tensor out_bias;    // [out]

  static ConvStack make(std::size_t in_channels, std::size_t out_channels, std::size_t width,
                        std::size_t layers, DType dtype, std::uint64_t seed);
  Tensor forward(Graph& g, const Tensor& x, Mode mode);
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
  std::vector<NamedTensor> state(const std::string& prefix) const;
  ConvStack clone() const;
};

// Functional forms of each adaptor.

Tensor linear_adaptor(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias);

struct LinearParams {
  Tensor weight;  // [3, k, 1, 1]
  Tensor bias;    // [3]
};

/// Principal-component projection of a pixel sample [M, k]: rows are the top
/// three eigenvectors of the sample covariance, largest first, each signed so
/// its largest-magnitude entry is positive; bias = -W * mean.
LinearParams pca_init(const Tensor& pixels, DType dtype = DType::f64);

Tensor subset_adaptor(Graph& g, const Tensor& x, const std::array<std::size_t, 3>& indices);
/// Three distinct channels drawn uniformly without replacement, in draw order.
std::array<std::size_t, 3> sample_subset(std::size_t k, std::uint64_t seed);

/// Four 16-filter 3x3 layers then a 1x1 conv to 3 channels.
ConvStack make_multilayer_params(std::size_t k, DType dtype, std::uint64_t seed);
/// Mirror of the multilayer adaptor mapping 3 channels back to k.
ConvStack make_multilayer_decoder(std::size_t k, DType dtype, std::uint64_t seed);
Tensor multilayer_adaptor(Graph& g, const Tensor& x, ConvStack& params, Mode mode);

struct AutoencoderConfig {
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct AutoencoderReport {
  double initial_loss = 0.0;
  /// Full-set reconstruction MSE (eval mode) after each epoch.
  std::vector<double> epoch_losses;
  double final_loss() const { return epoch_losses.empty() ? initial_loss : epoch_losses.back(); }
};

/// Trains encoder and decoder jointly to reconstruct `images` [M, k, H, W]
/// through the 3-channel bottleneck. Only the encoder is meant to be kept.
AutoencoderReport autoencoder_pretrain(ConvStack& encoder, ConvStack& decoder, const Tensor& images,
                                       const AutoencoderConfig& cfg);

/// R = (g3 x3 + g4 x4)/2, G = g2 x2, B = (g0 x0 + g1 x1)/2 on 5-channel input.
Tensor manual_merge(Graph& g, const Tensor& x, const std::vector<double>& gains);
/// The [3,5,1,1] weight that manual_merge applies.
Tensor manual_merge_weight(const std::vector<double>& gains, DType dtype);

/// An adaptor instance: spec plus its parameters.
class Adaptor {
 public:
  /// Random initialization (or index sampling) according to `spec`; pca and
  /// autoencoder initializations are applied afterwards with set_linear() or
  /// by training stack().
  static Adaptor create(const AdaptorSpec& spec, DType dtype);

  const AdaptorSpec& spec() const { return spec_; }
  std::size_t out_channels() const;

  Tensor apply(Graph& g, const Tensor& x, Mode mode);

  /// Trainable parameters, names prefixed with `prefix`.
  std::vector<NamedTensor> parameters(const std::string& prefix = "") const;
  std::vector<NamedTensor> state(const std::string& prefix = "") const;
  std::size_t parameter_count() const;
  Adaptor clone() const;

  LinearParams& linear();
  void set_linear(const LinearParams& p);
  ConvStack& stack();
  const std::array<std::size_t, 3>& indices() const { return indices_; }

 private:
  AdaptorSpec spec_;
  DType dtype_ = DType::f32;
  LinearParams linear_;
  std::optional<ConvStack> stack_;
  std::array<std::size_t, 3> indices_{0, 1, 2};
};

}  // namespace spadapt
