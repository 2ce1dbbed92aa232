#include "spadapt/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "spadapt/tensor_io.hpp"
#include "init.hpp"

namespace spadapt {
namespace {

using detail::deep_copy;

constexpr char kCheckpointMagic[4] = {'S', 'P', 'C', 'K'};
constexpr std::uint8_t kCheckpointVersion = 1;

}  // namespace

nlohmann::json BackboneArch::to_json() const {
  return {{"input_channels", input_channels},
          {"widths", widths},
          {"convs_per_block", convs_per_block},
          {"num_classes", num_classes},
          {"dtype", dtype_name(dtype)}};
}

BackboneArch BackboneArch::from_json(const nlohmann::json& j) {
  BackboneArch a;
  a.input_channels = j.at("input_channels").get<std::size_t>();
  a.widths = j.at("widths").get<std::vector<std::size_t>>();
  a.convs_per_block = j.at("convs_per_block").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  const auto d = j.at("dtype").get<std::string>();
  if (d == "float32") {
    a.dtype = DType::f32;
  } else if (d == "float64") {
    a.dtype = DType::f64;
  } else {
    throw std::invalid_argument("unknown dtype '" + d + "' in architecture descriptor");
  }
  return a;
}

// ---------------------------------------------------------------------------

const Tensor& Checkpoint::find(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 4);
  io::write_u8(os, kCheckpointVersion);
  io::write_string(os, ckpt.descriptor.dump());
  io::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& nt : ckpt.tensors) {
    io::write_string(os, nt.name);
    write_tensor(os, nt.tensor);
  }
  if (!os) throw std::runtime_error("error writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  const auto version = io::read_u8(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.descriptor = nlohmann::json::parse(io::read_string(is));
  const auto count = io::read_u32(is);
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = io::read_string(is);
    nt.tensor = read_tensor(is);
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------

Backbone::Backbone(BackboneArch arch, std::uint64_t seed) : arch_(std::move(arch)) {
  if (arch_.widths.empty()) throw std::invalid_argument("backbone needs at least one block");
  if (arch_.convs_per_block == 0) throw std::invalid_argument("convs_per_block must be >= 1");
  if (arch_.input_channels == 0 || arch_.num_classes == 0) {
    throw std::invalid_argument("input_channels and num_classes must be positive");
  }
  std::mt19937_64 rng(seed);
  std::size_t in = arch_.input_channels;
  for (std::size_t width : arch_.widths) {
    std::vector<ConvBnLayer> block;
    for (std::size_t j = 0; j < arch_.convs_per_block; ++j) {
      ConvBnLayer layer;
      layer.weight = detail::kaiming_conv(width, in, 3, 3, arch_.dtype, rng);
      layer.bias = detail::make_param({width}, arch_.dtype);
      layer.gamma = detail::constant_param({width}, arch_.dtype, 1.0);
      layer.beta = detail::make_param({width}, arch_.dtype);
      layer.bn = BatchNormState::make(width, arch_.dtype);
      block.push_back(std::move(layer));
      in = width;
    }
    blocks_.push_back(std::move(block));
  }
  init_head(rng());
}

void Backbone::init_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = arch_.widths.back();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  head_weight_ = detail::uniform_param({arch_.num_classes, d}, arch_.dtype, rng, bound);
  head_bias_ = detail::uniform_param({arch_.num_classes}, arch_.dtype, rng, bound);
}

Backbone Backbone::clone() const {
  Backbone b;
  b.arch_ = arch_;
  for (const auto& block : blocks_) {
    std::vector<ConvBnLayer> copy;
    for (const auto& l : block) {
      ConvBnLayer c;
      c.weight = deep_copy(l.weight);
      c.bias = deep_copy(l.bias);
      c.gamma = deep_copy(l.gamma);
      c.beta = deep_copy(l.beta);
      c.bn = l.bn;
      c.bn.running_mean = l.bn.running_mean.clone();
      c.bn.running_var = l.bn.running_var.clone();
      copy.push_back(std::move(c));
    }
    b.blocks_.push_back(std::move(copy));
  }
  b.head_weight_ = deep_copy(head_weight_);
  b.head_bias_ = deep_copy(head_bias_);
  return b;
}

void Backbone::run_block(Graph& g, Tensor& h, Mode mode, std::size_t b, std::size_t segments) {
  for (auto& layer : blocks_[b]) {
    h = conv2d(g, h, layer.weight, layer.bias, 1, 1);
    h = batchnorm2d(g, h, layer.gamma, layer.beta, layer.bn, mode, segments);
    h = relu(g, h);
  }
  h = maxpool2d(g, h, 2, 2);
}

Tensor Backbone::forward(Graph& g, const Tensor& x, Mode mode) {
  return head(g, features(g, x, mode));
}

Tensor Backbone::forward_until(Graph& g, const Tensor& x, Mode mode, std::size_t pool_block) {
  if (pool_block >= blocks_.size()) {
    throw std::out_of_range("pool_block " + std::to_string(pool_block) + " out of range for " +
                            std::to_string(blocks_.size()) + " blocks");
  }
  if (x.rank() != 4 || x.dim(1) != arch_.input_channels) {
    throw TensorError("backbone expects [N," + std::to_string(arch_.input_channels) +
                      ",H,W] input, got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t b = 0; b <= pool_block; ++b) run_block(g, h, mode, b);
  return h;
}

std::vector<Tensor> Backbone::forward_until_views(Graph& g, const std::vector<Tensor>& views,
                                                  Mode mode, std::size_t pool_block) {
  if (views.empty()) throw std::invalid_argument("forward_until_views: no views");
  if (views.size() == 1) return {forward_until(g, views.front(), mode, pool_block)};
  if (pool_block >= blocks_.size()) {
    throw std::out_of_range("pool_block " + std::to_string(pool_block) + " out of range for " +
                            std::to_string(blocks_.size()) + " blocks");
  }
  for (const auto& x : views) {
    if (x.rank() != 4 || x.dim(1) != arch_.input_channels || x.shape() != views.front().shape()) {
      throw TensorError("views must share one [N," + std::to_string(arch_.input_channels) +
                        ",H,W] shape, got " + shape_str(x.shape()));
    }
  }
  Tensor h = concat_batch(g, views);
  for (std::size_t b = 0; b <= pool_block; ++b) run_block(g, h, mode, b, views.size());
  return split_batch(g, h, views.size());
}

Tensor Backbone::forward_from(Graph& g, const Tensor& h_in, Mode mode, std::size_t pool_block) {
  if (pool_block >= blocks_.size()) {
    throw std::out_of_range("pool_block " + std::to_string(pool_block) + " out of range");
  }
  Tensor h = h_in;
  for (std::size_t b = pool_block + 1; b < blocks_.size(); ++b) run_block(g, h, mode, b);
  return head(g, global_avg_pool(g, h));
}

Tensor Backbone::features(Graph& g, const Tensor& x, Mode mode) {
  Tensor h = forward_until(g, x, mode, default_pool_block());
  return global_avg_pool(g, h);
}

Tensor Backbone::head(Graph& g, const Tensor& feats) {
  return dense(g, feats, head_weight_, head_bias_);
}

Tensor Backbone::first_layer_response(Graph& g, const Tensor& x) {
  const auto& l = first_layer();
  Tensor zero_bias(l.bias.shape(), l.bias.dtype());
  return conv2d(g, x, l.weight, zero_bias, 1, 1);
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t j = 0; j < blocks_[b].size(); ++j) {
      const auto& l = blocks_[b][j];
      const std::string p = "block" + std::to_string(b) + ".";
      const std::string c = p + "conv" + std::to_string(j);
      const std::string n = p + "bn" + std::to_string(j);
      out.push_back({c + ".weight", l.weight});
      out.push_back({c + ".bias", l.bias});
      out.push_back({n + ".weight", l.gamma});
      out.push_back({n + ".bias", l.beta});
    }
  }
  for (auto& nt : head_parameters()) out.push_back(std::move(nt));
  return out;
}

std::vector<NamedTensor> Backbone::head_parameters() const {
  return {{"head.weight", head_weight_}, {"head.bias", head_bias_}};
}

std::vector<NamedTensor> Backbone::state() const {
  std::vector<NamedTensor> out = parameters();
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t j = 0; j < blocks_[b].size(); ++j) {
      const std::string n = "block" + std::to_string(b) + ".bn" + std::to_string(j);
      out.push_back({n + ".running_mean", blocks_[b][j].bn.running_mean});
      out.push_back({n + ".running_var", blocks_[b][j].bn.running_var});
    }
  }
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : parameters()) n += nt.tensor.numel();
  return n;
}

Checkpoint Backbone::to_checkpoint(const nlohmann::json& metadata) const {
  Checkpoint ckpt;
  ckpt.descriptor = {{"format", "backbone"}, {"arch", arch_.to_json()}};
  if (!metadata.is_null()) ckpt.descriptor["metadata"] = metadata;
  for (const auto& nt : state()) ckpt.tensors.push_back({nt.name, nt.tensor.clone()});
  return ckpt;
}

Backbone Backbone::from_checkpoint(const Checkpoint& ckpt) {
  Backbone b(BackboneArch::from_json(ckpt.descriptor.at("arch")), 0);
  b.load_state(ckpt);
  return b;
}

void Backbone::load_state(const Checkpoint& ckpt) {
  const auto theirs = BackboneArch::from_json(ckpt.descriptor.at("arch"));
  if (!(theirs == arch_)) {
    throw std::invalid_argument("checkpoint architecture " + theirs.to_json().dump() +
                                " does not match backbone " + arch_.to_json().dump());
  }
  for (auto& nt : state()) {
    const Tensor& src = ckpt.find(nt.name);
    if (src.shape() != nt.tensor.shape() || src.dtype() != nt.tensor.dtype()) {
      throw std::invalid_argument("checkpoint tensor '" + nt.name + "' has shape " +
                                  shape_str(src.shape()) + ", expected " +
                                  shape_str(nt.tensor.shape()));
    }
    dispatch(src.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto from = src.values<T>();
      auto to = nt.tensor.mutable_values<T>();
      std::copy(from.begin(), from.end(), to.begin());
    });
  }
}

// ---------------------------------------------------------------------------

Backbone replace_head(const Backbone& net, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0) throw std::invalid_argument("replace_head: num_classes must be positive");
  Backbone out = net.clone();
  out.arch_.num_classes = num_classes;
  out.init_head(seed);
  return out;
}

Backbone inflate_first_layer(const Backbone& net, std::size_t k) {
  if (net.arch().input_channels != 3) {
    throw std::invalid_argument("inflate_first_layer: backbone must take 3 channels, takes " +
                                std::to_string(net.arch().input_channels));
  }
  if (k == 0) throw std::invalid_argument("inflate_first_layer: k must be positive");
  Backbone out = net.clone();
  out.arch_.input_channels = k;
  ConvBnLayer& first = out.first_layer();
  const Tensor& w = net.first_layer().weight;
  const std::size_t F = w.dim(0), taps = w.dim(2) * w.dim(3);
  Tensor inflated({F, k, w.dim(2), w.dim(3)}, w.dtype());
  dispatch(w.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = w.values<T>();
    auto dst = inflated.mutable_values<T>();
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < taps; ++t) {
        const T* base = src.data() + f * 3 * taps + t;
        const T mean = (base[0] + base[taps] + base[2 * taps]) / T(3);
        for (std::size_t c = 0; c < k; ++c) dst[(f * k + c) * taps + t] = mean;
      }
    }
  });
  inflated.set_requires_grad(true);
  first.weight = inflated;
  return out;
}

}  // namespace spadapt
