#include "spadapt/adaptors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "init.hpp"
#include "spadapt/optim.hpp"

namespace spadapt {
namespace {

constexpr std::size_t kMultilayerWidth = 16;
constexpr std::size_t kMultilayerDepth = 4;

}  // namespace

std::string to_string(AdaptorKind kind) {
  switch (kind) {
    case AdaptorKind::identity: return "identity";
    case AdaptorKind::linear: return "linear";
    case AdaptorKind::subset: return "subset";
    case AdaptorKind::multilayer: return "multilayer";
    case AdaptorKind::inflate: return "inflate";
    case AdaptorKind::manual_merge: return "manual_merge";
  }
  return "?";
}

std::string to_string(AdaptorInit init) {
  switch (init) {
    case AdaptorInit::random: return "random";
    case AdaptorInit::pca: return "pca";
    case AdaptorInit::autoencoder: return "autoencoder";
  }
  return "?";
}

AdaptorKind parse_adaptor_kind(const std::string& s) {
  for (auto k : {AdaptorKind::identity, AdaptorKind::linear, AdaptorKind::subset,
                 AdaptorKind::multilayer, AdaptorKind::inflate, AdaptorKind::manual_merge}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown adaptor kind '" + s + "'");
}

AdaptorInit parse_adaptor_init(const std::string& s) {
  for (auto i : {AdaptorInit::random, AdaptorInit::pca, AdaptorInit::autoencoder}) {
    if (to_string(i) == s) return i;
  }
  throw std::invalid_argument("unknown adaptor init '" + s + "'");
}

void AdaptorSpec::validate() const {
  if (kind != AdaptorKind::subset && !indices.empty()) {
    throw std::invalid_argument("channel indices are only valid for subset adaptors");
  }
  if (kind != AdaptorKind::manual_merge && !gains.empty()) {
    throw std::invalid_argument("gains are only valid for manual_merge adaptors");
  }
  if (init == AdaptorInit::pca && kind != AdaptorKind::linear) {
    throw std::invalid_argument("pca init applies to linear adaptors only");
  }
  if (init == AdaptorInit::autoencoder && kind != AdaptorKind::multilayer) {
    throw std::invalid_argument("autoencoder init applies to multilayer adaptors only");
  }
  // k_in == 0 marks a template whose channel count comes from the dataset.
  const bool resolved = k_in != 0;
  if (kind == AdaptorKind::subset) {
    if (resolved && k_in < 3) {
      throw std::invalid_argument("subset adaptor needs k >= 3, got " + std::to_string(k_in));
    }
    if (!indices.empty()) {
      if (indices.size() != 3) throw std::invalid_argument("subset needs exactly 3 indices");
      std::set<std::size_t> uniq(indices.begin(), indices.end());
      if (uniq.size() != 3) throw std::invalid_argument("subset indices must be distinct");
      for (auto i : indices) {
        if (resolved && i >= k_in) {
          throw std::invalid_argument("subset index " + std::to_string(i) + " out of range for k=" +
                                      std::to_string(k_in));
        }
      }
    }
  }
  if (kind == AdaptorKind::manual_merge) {
    if (resolved && k_in != 5) {
      throw std::invalid_argument("manual_merge needs k = 5, got " + std::to_string(k_in));
    }
    if (gains.size() != 5) throw std::invalid_argument("manual_merge needs 5 gains");
  }
}

nlohmann::json AdaptorSpec::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)},
                   {"k_in", k_in},
                   {"init", to_string(init)},
                   {"seed", seed}};
  if (!indices.empty()) j["indices"] = indices;
  if (!gains.empty()) j["gains"] = gains;
  return j;
}

AdaptorSpec AdaptorSpec::from_json(const nlohmann::json& j) {
  AdaptorSpec s;
  s.kind = parse_adaptor_kind(j.at("kind").get<std::string>());
  s.k_in = j.at("k_in").get<std::size_t>();
  s.init = parse_adaptor_init(j.value("init", std::string("random")));
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("indices")) s.indices = j.at("indices").get<std::vector<std::size_t>>();
  if (j.contains("gains")) s.gains = j.at("gains").get<std::vector<double>>();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------

ConvStack ConvStack::make(std::size_t in_channels, std::size_t out_channels, std::size_t width,
                          std::size_t layers, DType dtype, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ConvStack s;
  std::size_t in = in_channels;
  for (std::size_t i = 0; i < layers; ++i) {
    ConvBnLayer l;
    l.weight = detail::kaiming_conv(width, in, 3, 3, dtype, rng);
    l.bias = detail::make_param({width}, dtype);
    l.gamma = detail::constant_param({width}, dtype, 1.0);
    l.beta = detail::make_param({width}, dtype);
    l.bn = BatchNormState::make(width, dtype);
    s.hidden.push_back(std::move(l));
    in = width;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  s.out_weight = detail::uniform_param({out_channels, in, 1, 1}, dtype, rng, bound);
  s.out_bias = detail::uniform_param({out_channels}, dtype, rng, bound);
  return s;
}

Tensor ConvStack::forward(Graph& g, const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : hidden) {
    h = conv2d(g, h, l.weight, l.bias, 1, 1);
    h = batchnorm2d(g, h, l.gamma, l.beta, l.bn, mode);
    h = relu(g, h);
  }
  return conv2d(g, h, out_weight, out_bias);
}

std::vector<NamedTensor> ConvStack::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string p = prefix + "layer" + std::to_string(i) + ".";
    out.push_back({p + "conv.weight", hidden[i].weight});
    out.push_back({p + "conv.bias", hidden[i].bias});
    out.push_back({p + "bn.weight", hidden[i].gamma});
    out.push_back({p + "bn.bias", hidden[i].beta});
  }
  out.push_back({prefix + "out.weight", out_weight});
  out.push_back({prefix + "out.bias", out_bias});
  return out;
}

std::vector<NamedTensor> ConvStack::state(const std::string& prefix) const {
  auto out = parameters(prefix);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string p = prefix + "layer" + std::to_string(i) + ".bn.";
    out.push_back({p + "running_mean", hidden[i].bn.running_mean});
    out.push_back({p + "running_var", hidden[i].bn.running_var});
  }
  return out;
}

ConvStack ConvStack::clone() const {
  ConvStack s;
  for (const auto& l : hidden) {
    ConvBnLayer c;
    c.weight = detail::deep_copy(l.weight);
    c.bias = detail::deep_copy(l.bias);
    c.gamma = detail::deep_copy(l.gamma);
    c.beta = detail::deep_copy(l.beta);
    c.bn = l.bn;
    c.bn.running_mean = l.bn.running_mean.clone();
    c.bn.running_var = l.bn.running_var.clone();
    s.hidden.push_back(std::move(c));
  }
  s.out_weight = detail::deep_copy(out_weight);
  s.out_bias = detail::deep_copy(out_bias);
  return s;
}

// ---------------------------------------------------------------------------

Tensor linear_adaptor(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4) throw TensorError("linear_adaptor: input must be [N,k,H,W]");
  if (weight.rank() != 4 || weight.dim(2) != 1 || weight.dim(3) != 1) {
    throw TensorError("linear_adaptor: weight must be [out,k,1,1], got " +
                      shape_str(weight.shape()));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw TensorError("linear_adaptor: weight has " + std::to_string(weight.dim(1)) +
                      " input channels, image has " + std::to_string(x.dim(1)));
  }
  return conv2d(g, x, weight, bias);
}

LinearParams pca_init(const Tensor& pixels, DType dtype) {
  if (pixels.rank() != 2) throw std::invalid_argument("pca_init: pixels must be [M,k]");
  const std::size_t M = pixels.dim(0), k = pixels.dim(1);
  if (M < k) {
    throw std::invalid_argument("pca_init: need at least k=" + std::to_string(k) +
                                " pixels, got " + std::to_string(M));
  }
  const auto v = pixels.to_doubles();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      v.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(k));
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mean;
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(M > 1 ? M - 1 : 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("pca_init: eigensolver failed");
  const Eigen::VectorXd& evals = es.eigenvalues();  // ascending
  const double top = std::max(evals(evals.size() - 1), 0.0);
  const double cutoff = top * 1e-12 * static_cast<double>(k);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < evals.size(); ++i) {
    if (evals(i) > cutoff && top > 0.0) ++rank;
  }
  if (rank < 3) {
    throw std::invalid_argument("pca_init: pixel covariance has rank " + std::to_string(rank) +
                                " < 3");
  }
  std::vector<double> w(3 * k), b(3);
  for (std::size_t r = 0; r < 3; ++r) {
    Eigen::VectorXd dir = es.eigenvectors().col(static_cast<Eigen::Index>(k - 1 - r));
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    for (std::size_t c = 0; c < k; ++c) w[r * k + c] = dir(static_cast<Eigen::Index>(c));
    b[r] = -dir.dot(mean.transpose());
  }
  LinearParams p;
  p.weight = Tensor::from_doubles({3, k, 1, 1}, w, dtype);
  p.bias = Tensor::from_doubles({3}, b, dtype);
  p.weight.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  return p;
}

Tensor subset_adaptor(Graph& g, const Tensor& x, const std::array<std::size_t, 3>& indices) {
  if (x.rank() != 4) throw TensorError("subset_adaptor: input must be [N,k,H,W]");
  if (x.dim(1) < 3) {
    throw std::invalid_argument("subset_adaptor: need k >= 3, got " + std::to_string(x.dim(1)));
  }
  if (indices[0] == indices[1] || indices[0] == indices[2] || indices[1] == indices[2]) {
    throw std::invalid_argument("subset_adaptor: duplicate channel index");
  }
  return gather_channels(g, x, indices);
}

std::array<std::size_t, 3> sample_subset(std::size_t k, std::uint64_t seed) {
  if (k < 3) throw std::invalid_argument("sample_subset: need k >= 3, got " + std::to_string(k));
  std::vector<std::size_t> pool(k);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::array<std::size_t, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, k - 1);
    std::swap(pool[i], pool[pick(rng)]);
    out[i] = pool[i];
  }
  return out;
}

ConvStack make_multilayer_params(std::size_t k, DType dtype, std::uint64_t seed) {
  return ConvStack::make(k, 3, kMultilayerWidth, kMultilayerDepth, dtype, seed);
}

ConvStack make_multilayer_decoder(std::size_t k, DType dtype, std::uint64_t seed) {
  return ConvStack::make(3, k, kMultilayerWidth, kMultilayerDepth, dtype, seed);
}

Tensor multilayer_adaptor(Graph& g, const Tensor& x, ConvStack& params, Mode mode) {
  return params.forward(g, x, mode);
}

namespace {

Tensor batch_of(const Tensor& images, std::span<const std::size_t> rows) {
  const std::size_t per = images.numel() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = rows.size();
  Tensor out(shape, images.dtype());
  dispatch(images.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = images.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(src.data() + rows[i] * per, per, dst.data() + i * per);
    }
  });
  return out;
}

double reconstruction_loss(ConvStack& enc, ConvStack& dec, const Tensor& images,
                           std::size_t batch) {
  const std::size_t M = images.dim(0);
  double total = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < M; start += batch) {
    rows.clear();
    for (std::size_t i = start; i < std::min(M, start + batch); ++i) rows.push_back(i);
    Graph g(Graph::Mode::no_grad);
    Tensor x = batch_of(images, rows);
    Tensor y = dec.forward(g, enc.forward(g, x, Mode::eval), Mode::eval);
    total += mse(g, y, x).item() * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(M);
}

}  // namespace

AutoencoderReport autoencoder_pretrain(ConvStack& encoder, ConvStack& decoder, const Tensor& images,
                                       const AutoencoderConfig& cfg) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw std::invalid_argument("autoencoder_pretrain: images must be a non-empty [M,k,H,W]");
  }
  if (cfg.batch_size == 0) throw std::invalid_argument("autoencoder_pretrain: batch_size is 0");
  Adam opt;
  opt.add_group("encoder", encoder.parameters("encoder."), 1.0);
  opt.add_group("decoder", decoder.parameters("decoder."), 1.0);

  AutoencoderReport report;
  report.initial_loss = reconstruction_loss(encoder, decoder, images, cfg.batch_size);
  const std::size_t M = images.dim(0);
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    try {
      for (std::size_t start = 0; start < M; start += cfg.batch_size) {
        const std::size_t end = std::min(M, start + cfg.batch_size);
        Tensor x = batch_of(images, std::span<const std::size_t>(order).subspan(start, end - start));
        opt.zero_grad();
        Graph g;
        Tensor y = decoder.forward(g, encoder.forward(g, x, Mode::train), Mode::train);
        Tensor loss = mse(g, y, x);
        g.backward(loss);
        opt.step(cfg.lr);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("autoencoder diverged in epoch " + std::to_string(epoch) + ": " +
                           e.what());
    }
    report.epoch_losses.push_back(reconstruction_loss(encoder, decoder, images, cfg.batch_size));
  }
  return report;
}

Tensor manual_merge_weight(const std::vector<double>& gains, DType dtype) {
  if (gains.size() != 5) {
    throw std::invalid_argument("manual_merge: need 5 gains, got " + std::to_string(gains.size()));
  }
  std::vector<double> w(15, 0.0);
  w[0 * 5 + 3] = gains[3] / 2;
  w[0 * 5 + 4] = gains[4] / 2;
  w[1 * 5 + 2] = gains[2];
  w[2 * 5 + 0] = gains[0] / 2;
  w[2 * 5 + 1] = gains[1] / 2;
  return Tensor::from_doubles({3, 5, 1, 1}, w, dtype);
}

Tensor manual_merge(Graph& g, const Tensor& x, const std::vector<double>& gains) {
  if (x.rank() != 4 || x.dim(1) != 5) {
    throw std::invalid_argument("manual_merge: input must have 5 channels, got shape " +
                                shape_str(x.shape()));
  }
  Tensor zero({3}, x.dtype());
  return conv2d(g, x, manual_merge_weight(gains, x.dtype()), zero);
}

// ---------------------------------------------------------------------------

Adaptor Adaptor::create(const AdaptorSpec& spec, DType dtype) {
  if (spec.k_in == 0) throw std::invalid_argument("adaptor k_in must be positive");
  spec.validate();
  Adaptor a;
  a.spec_ = spec;
  a.dtype_ = dtype;
  const std::size_t k = spec.k_in;
  switch (spec.kind) {
    case AdaptorKind::identity:
    case AdaptorKind::inflate:
      break;
    case AdaptorKind::linear: {
      std::mt19937_64 rng(spec.seed);
      const double bound = 1.0 / std::sqrt(static_cast<double>(k));
      a.linear_.weight = detail::uniform_param({3, k, 1, 1}, dtype, rng, bound);
      a.linear_.bias = detail::uniform_param({3}, dtype, rng, bound);
      break;
    }
    case AdaptorKind::subset:
      if (spec.indices.empty()) {
        a.indices_ = sample_subset(k, spec.seed);
      } else {
        std::copy(spec.indices.begin(), spec.indices.end(), a.indices_.begin());
      }
      break;
    case AdaptorKind::multilayer:
      a.stack_ = make_multilayer_params(k, dtype, spec.seed);
      break;
    case AdaptorKind::manual_merge:
      a.linear_.weight = manual_merge_weight(spec.gains, dtype);
      a.linear_.bias = Tensor({3}, dtype);
      break;
  }
  return a;
}

std::size_t Adaptor::out_channels() const {
  if (spec_.kind == AdaptorKind::identity || spec_.kind == AdaptorKind::inflate) return spec_.k_in;
  return 3;
}

Tensor Adaptor::apply(Graph& g, const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != spec_.k_in) {
    throw TensorError(to_string(spec_.kind) + " adaptor expects " + std::to_string(spec_.k_in) +
                      " channels, got shape " + shape_str(x.shape()));
  }
  switch (spec_.kind) {
    case AdaptorKind::identity:
    case AdaptorKind::inflate:
      return x;
    case AdaptorKind::linear:
      return linear_adaptor(g, x, linear_.weight, linear_.bias);
    case AdaptorKind::subset:
      return subset_adaptor(g, x, indices_);
    case AdaptorKind::multilayer:
      return multilayer_adaptor(g, x, *stack_, mode);
    case AdaptorKind::manual_merge:
      return conv2d(g, x, linear_.weight, linear_.bias);
  }
  throw std::logic_error("unreachable adaptor kind");
}

std::vector<NamedTensor> Adaptor::parameters(const std::string& prefix) const {
  switch (spec_.kind) {
    case AdaptorKind::linear:
      return {{prefix + "weight", linear_.weight}, {prefix + "bias", linear_.bias}};
    case AdaptorKind::multilayer:
      return stack_->parameters(prefix);
    default:
      return {};
  }
}

std::vector<NamedTensor> Adaptor::state(const std::string& prefix) const {
  if (spec_.kind == AdaptorKind::multilayer) return stack_->state(prefix);
  return parameters(prefix);
}

std::size_t Adaptor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Adaptor Adaptor::clone() const {
  Adaptor a = *this;
  if (linear_.weight.defined()) a.linear_.weight = detail::deep_copy(linear_.weight);
  if (linear_.bias.defined()) a.linear_.bias = detail::deep_copy(linear_.bias);
  if (stack_) a.stack_ = stack_->clone();
  return a;
}

LinearParams& Adaptor::linear() {
  if (spec_.kind != AdaptorKind::linear) throw std::logic_error("adaptor is not linear");
  return linear_;
}

void Adaptor::set_linear(const LinearParams& p) {
  const std::size_t k = spec_.k_in;
  if (p.weight.shape() != Shape{3, k, 1, 1} || p.bias.shape() != Shape{3}) {
    throw std::invalid_argument("set_linear: expected [3," + std::to_string(k) + ",1,1] weight");
  }
  linear().weight = p.weight.to(dtype_).set_requires_grad(true);
  linear_.bias = p.bias.to(dtype_).set_requires_grad(true);
}

ConvStack& Adaptor::stack() {
  if (!stack_) throw std::logic_error("adaptor has no layer stack");
  return *stack_;
}

}  // namespace spadapt
