#include "spadapt/training.hpp"

#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "seed.hpp"

namespace spadapt {

using detail::derive_seed;

namespace {

// Sub-stream tags for derive_seed.
enum : std::uint64_t {
  kStreamBackbone = 1,
  kStreamHead = 2,
  kStreamView = 3,
  kStreamEpoch = 4,
  kStreamAutoencoder = 5,
  kStreamPca = 6,
};

Tensor rot90(const Tensor& img, int quarter_turns) {
  const std::size_t K = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H != W) throw std::invalid_argument("rotation augmentation needs square images");
  Tensor out(img.shape(), img.dtype());
  dispatch(img.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = img.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t c = 0; c < K; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          std::size_t sy = y, sx = x;
          switch (quarter_turns & 3) {
            case 1: sy = x; sx = W - 1 - y; break;
            case 2: sy = H - 1 - y; sx = W - 1 - x; break;
            case 3: sy = H - 1 - x; sx = y; break;
            default: break;
          }
          dst[(c * H + y) * W + x] = src[(c * H + sy) * W + sx];
        }
      }
    }
  });
  return out;
}

struct LoopSettings {
  Schedule schedule;
  double decay = 0.1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool hflip = true;
  bool rotations = false;
  bool diversity = false;
  DiversityRegConfig diversity_cfg;
  DType dtype = DType::f32;
};

/// Copies of the augmented training images for one batch.
Tensor training_batch(const std::vector<HyperImage>& images, std::span<const std::size_t> rows,
                      const LoopSettings& s, std::mt19937_64& rng) {
  if (!s.hflip && !s.rotations) return stack_images(images, rows, s.dtype);
  std::vector<HyperImage> aug;
  aug.reserve(rows.size());
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> turns(0, 3);
  for (auto r : rows) {
    Tensor t = images[r].data;
    if (s.hflip && coin(rng)) t = hflip(t);
    if (s.rotations) t = rot90(t, turns(rng));
    aug.push_back({t, images[r].label, {}});
  }
  std::vector<std::size_t> idx(aug.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return stack_images(aug, idx, s.dtype);
}

void train_loop(MultiViewModel& model, const Dataset& data, const LoopSettings& s, Adam& opt,
                MetricsRecord& rec, const EpochCallback& on_epoch) {
  const auto& train = data.train;
  if (train.empty()) throw std::invalid_argument("training split is empty");
  std::vector<std::size_t> order(train.size());
  std::vector<int> labels;
  const bool use_reg = s.diversity && model.num_views() > 1;

  for (std::size_t epoch = 0; epoch < s.schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(s.seed, {kStreamEpoch, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = scheduled_lr(s.schedule, s.decay, epoch);
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += s.batch_size) {
        const std::size_t n = std::min(s.batch_size, order.size() - start);
        const auto rows = std::span<const std::size_t>(order).subspan(start, n);
        Tensor x = training_batch(train, rows, s, rng);
        labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = train[rows[i]].label;

        opt.zero_grad();
        Graph g;
        std::vector<Tensor> views;
        Tensor logits = model.forward(g, x, Mode::train, use_reg ? &views : nullptr);
        Tensor loss = softmax_cross_entropy(g, logits, labels);
        if (use_reg) loss = add(g, loss, diversity_reg(g, concat_channels(g, views), s.diversity_cfg));
        loss_sum += loss.item() * static_cast<double>(n);
        g.backward(loss);
        opt.step(lr);
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    rec.train_loss.push_back(loss_sum / static_cast<double>(order.size()));
    rec.test_accuracy.push_back(evaluate(model, data.test, s.dtype));
    rec.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (on_epoch) on_epoch(epoch, rec);
  }
}

MetricsRecord begin_record(const ExperimentConfig& cfg) {
  MetricsRecord rec;
  rec.config = cfg.to_json();
  rec.config_hash = config_hash(cfg);
  return rec;
}

void finish_record(MetricsRecord& rec, MultiViewModel& model, const Dataset& data, DType dtype,
                   std::chrono::steady_clock::time_point start) {
  rec.final_accuracy =
      rec.test_accuracy.empty() ? evaluate(model, data.test, dtype) : rec.test_accuracy.back();
  // Eval-mode accuracy on the (unaugmented) training split; the gap to the
  // test accuracy shows overfitting.
  rec.extra["train_accuracy"] = evaluate(model, data.train, dtype);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rec.extra["parameters"] = model.parameter_count();
  std::size_t adaptor_params = 0;
  for (const auto& p : model.adaptor_parameters()) adaptor_params += p.tensor.numel();
  rec.extra["adaptor_parameters"] = adaptor_params;
}

LoopSettings loop_settings(const ExperimentConfig& cfg, const Schedule& schedule) {
  LoopSettings s;
  s.schedule = schedule;
  s.decay = cfg.optimizer.decay;
  s.batch_size = cfg.optimizer.batch_size;
  s.seed = cfg.seed;
  s.hflip = cfg.hflip;
  s.rotations = cfg.rotations;
  s.diversity = cfg.diversity;
  s.diversity_cfg = cfg.diversity_cfg;
  s.dtype = cfg.dtype;
  return s;
}

nlohmann::json schedule_json(const Schedule& s) {
  return {{"lr", s.lr}, {"epochs", s.epochs}, {"milestones", s.milestones}};
}

BackboneArch arch_for(const ExperimentConfig& cfg, std::size_t channels, std::size_t classes) {
  BackboneArch a;
  a.input_channels = channels;
  a.widths = cfg.widths;
  a.num_classes = classes;
  a.dtype = cfg.dtype;
  return a;
}

std::vector<double> channel_variance(const Dataset& data) {
  const std::size_t k = data.channels;
  std::vector<double> sum(k, 0.0), sq(k, 0.0);
  std::size_t count = 0;
  for (const auto& im : data.train) {
    const auto v = im.data.to_doubles();
    const std::size_t P = v.size() / k;
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t p = 0; p < P; ++p) {
        sum[c] += v[c * P + p];
        sq[c] += v[c * P + p] * v[c * P + p];
      }
    }
    count += P;
  }
  std::vector<double> var(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double m = sum[c] / static_cast<double>(count);
    var[c] = sq[c] / static_cast<double>(count) - m * m;
  }
  return var;
}

double frobenius_distance(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].tensor.to_doubles(), y = b[i].tensor.to_doubles();
    for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - y[j]) * (x[j] - y[j]);
  }
  return std::sqrt(s);
}

std::vector<NamedTensor> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<NamedTensor> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

Tensor all_training_images(const Dataset& data, DType dtype) {
  std::vector<std::size_t> rows(data.train.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return stack_images(data.train, rows, dtype);
}

}  // namespace

double scheduled_lr(const Schedule& s, double decay, std::size_t epoch) {
  double lr = s.lr;
  for (auto m : s.milestones) {
    if (epoch >= m) lr *= decay;
  }
  return lr;
}

double evaluate(MultiViewModel& model, const std::vector<HyperImage>& images, DType dtype,
                std::size_t batch_size) {
  if (images.empty()) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) {
      rows.push_back(i);
    }
    Graph g(Graph::Mode::no_grad);
    const Tensor logits = model.forward(g, stack_images(images, rows, dtype), Mode::eval);
    const std::size_t K = logits.dim(1);
    const auto v = logits.to_doubles();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto first = v.begin() + static_cast<std::ptrdiff_t>(i * K);
      const auto pred = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(K)) - first);
      if (pred == images[rows[i]].label) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(images.size());
}

std::vector<Adaptor> build_views(const ExperimentConfig& cfg, const Dataset& data) {
  const std::size_t k = data.channels;
  AdaptorSpec base = cfg.adaptor;
  if (base.k_in != 0 && base.k_in != k) {
    throw std::invalid_argument("adaptor expects " + std::to_string(base.k_in) +
                                " channels, dataset has " + std::to_string(k));
  }
  base.k_in = k;
  std::vector<Adaptor> views;
  for (std::size_t i = 0; i < cfg.num_views; ++i) {
    AdaptorSpec spec = base;
    spec.seed = derive_seed(cfg.seed, {kStreamView, base.seed, i});
    Adaptor a = Adaptor::create(spec, cfg.dtype);
    if (spec.init == AdaptorInit::pca) {
      const auto pixels_seed = derive_seed(cfg.seed, {kStreamPca, i});
      // PCA over k-channel pixels sampled from the training split.
      std::mt19937_64 rng(pixels_seed);
      const std::size_t P = data.train.front().data.dim(1) * data.train.front().data.dim(2);
      const std::size_t total = data.train.size() * P;
      const std::size_t M = std::min(cfg.pca_pixels, total);
      std::uniform_int_distribution<std::size_t> pick(0, total - 1);
      std::vector<double> px;
      px.reserve(M * k);
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t flat = M == total ? m : pick(rng);
        const auto& img = data.train[flat / P].data;
        for (std::size_t c = 0; c < k; ++c) px.push_back(img.at(c * P + flat % P));
      }
      a.set_linear(pca_init(Tensor::from_doubles({M, k}, px, DType::f64)));
    } else if (spec.init == AdaptorInit::autoencoder) {
      AutoencoderConfig ac = cfg.autoencoder;
      ac.seed = derive_seed(cfg.seed, {kStreamAutoencoder, i});
      ConvStack decoder = make_multilayer_decoder(k, cfg.dtype, ac.seed);
      autoencoder_pretrain(a.stack(), decoder, all_training_images(data, cfg.dtype), ac);
    }
    views.push_back(std::move(a));
  }
  return views;
}

Adam build_optimizer(const MultiViewModel& model, const ExperimentConfig& cfg) {
  Adam opt;
  opt.add_group("adaptor", model.adaptor_parameters(), cfg.adaptor_lr_multiplier);
  std::vector<NamedTensor> backbone;
  if (cfg.freeze_backbone) {
    backbone = model.backbone().head_parameters();
  } else {
    backbone = model.backbone_parameters();
  }
  opt.add_group("backbone", backbone, 1.0);
  return opt;
}

PretrainResult pretrain(const ExperimentConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.mode != RunMode::pretrain) throw std::invalid_argument("pretrain needs mode=pretrain");
  const auto start = std::chrono::steady_clock::now();
  const auto data = resolve_dataset(cfg.dataset);
  if (data->channels != 3) {
    throw std::invalid_argument("pretraining needs a 3-channel dataset, got " +
                                std::to_string(data->channels) + " channels");
  }
  Backbone net(arch_for(cfg, 3, data->num_classes()), derive_seed(cfg.seed, {kStreamBackbone}));
  AdaptorSpec id{.kind = AdaptorKind::identity, .k_in = 3};
  std::vector<Adaptor> views;
  views.push_back(Adaptor::create(id, cfg.dtype));
  MultiViewModel model(std::move(views), std::move(net), cfg.pool_block, cfg.pool);

  MetricsRecord rec = begin_record(cfg);
  const Schedule schedule{cfg.optimizer.lr, cfg.optimizer.epochs, cfg.optimizer.milestones};
  rec.resolved = schedule_json(schedule);
  Adam opt;
  opt.add_group("backbone", model.backbone_parameters(), 1.0);
  train_loop(model, *data, loop_settings(cfg, schedule), opt, rec, on_epoch);
  finish_record(rec, model, *data, cfg.dtype, start);

  PretrainResult out;
  out.checkpoint = model.backbone().to_checkpoint(
      {{"config_hash", rec.config_hash}, {"final_accuracy", rec.final_accuracy}});
  out.metrics = std::move(rec);
  return out;
}

MetricsRecord finetune(const ExperimentConfig& cfg, const Checkpoint& pretrained,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.mode != RunMode::finetune) throw std::invalid_argument("finetune needs mode=finetune");
  const auto start = std::chrono::steady_clock::now();
  const auto data = resolve_dataset(cfg.dataset);
  const std::size_t k = data->channels;
  Backbone base = Backbone::from_checkpoint(pretrained);
  if (base.arch().input_channels != 3) {
    throw std::invalid_argument("fine-tuning expects a 3-channel pretrained backbone");
  }
  if (base.arch().dtype != cfg.dtype) {
    throw std::invalid_argument("checkpoint dtype differs from the configured dtype");
  }
  Backbone net = replace_head(base, data->num_classes(), derive_seed(cfg.seed, {kStreamHead}));

  MetricsRecord rec = begin_record(cfg);
  if (cfg.adaptor.kind == AdaptorKind::identity && k != 3) {
    throw std::invalid_argument("identity adaptor needs 3 channels, dataset has " +
                                std::to_string(k) + "; pick an adaptor or inflate");
  }
  if (cfg.adaptor.kind == AdaptorKind::inflate) net = inflate_first_layer(net, k);
  if (cfg.freeze_backbone) {
    for (auto& p : net.parameters()) p.tensor.set_requires_grad(false);
    for (auto& p : net.head_parameters()) p.tensor.set_requires_grad(true);
  }

  std::vector<Adaptor> views = build_views(cfg, *data);
  nlohmann::json view_info = nlohmann::json::array();
  for (const auto& v : views) {
    nlohmann::json vi = v.spec().to_json();
    if (v.spec().kind == AdaptorKind::subset) vi["indices"] = v.indices();
    view_info.push_back(vi);
  }
  MultiViewModel model(std::move(views), std::move(net), cfg.pool_block, cfg.pool);

  Schedule schedule{cfg.optimizer.lr, cfg.optimizer.epochs, cfg.optimizer.milestones};
  if (cfg.scale_views) schedule = scale_schedule(schedule, cfg.num_views);
  rec.resolved = schedule_json(schedule);
  rec.resolved["adaptor_lr"] = schedule.lr * cfg.adaptor_lr_multiplier;
  rec.resolved["views"] = view_info;
  rec.resolved["pool_block"] = model.pool_block();

  if (cfg.adaptor.kind == AdaptorKind::inflate) {
    // Activation scale of the inflated first layer on the first training batch.
    std::vector<std::size_t> rows(std::min<std::size_t>(64, data->train.size()));
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Graph g(Graph::Mode::no_grad);
    const auto resp = model.backbone().first_layer_response(g, stack_images(data->train, rows, cfg.dtype)).to_doubles();
    double ss = 0.0;
    for (double r : resp) ss += r * r;
    rec.extra["first_layer_rms"] = std::sqrt(ss / static_cast<double>(resp.size()));
  }
  if (k != 3) rec.extra["channel_variance"] = channel_variance(*data);

  const auto initial = snapshot(model.adaptor_parameters());
  Adam opt = build_optimizer(model, cfg);
  train_loop(model, *data, loop_settings(cfg, schedule), opt, rec, on_epoch);
  rec.extra["adaptor_delta_fro"] = frobenius_distance(initial, model.adaptor_parameters());
  finish_record(rec, model, *data, cfg.dtype, start);
  return rec;
}

MetricsRecord train_scratch(const ExperimentConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.mode != RunMode::scratch) throw std::invalid_argument("train_scratch needs mode=scratch");
  const auto start = std::chrono::steady_clock::now();
  const auto data = resolve_dataset(cfg.dataset);
  const std::size_t k = data->channels;
  Backbone net(arch_for(cfg, k, data->num_classes()), derive_seed(cfg.seed, {kStreamBackbone}));
  std::vector<Adaptor> views;
  views.push_back(Adaptor::create(AdaptorSpec{.kind = AdaptorKind::identity, .k_in = k}, cfg.dtype));
  MultiViewModel model(std::move(views), std::move(net), cfg.pool_block, cfg.pool);

  MetricsRecord rec = begin_record(cfg);
  Schedule schedule{cfg.optimizer.lr, cfg.optimizer.epochs * cfg.scratch_epoch_multiplier,
                    cfg.optimizer.milestones};
  for (auto& m : schedule.milestones) m *= cfg.scratch_epoch_multiplier;
  rec.resolved = schedule_json(schedule);
  rec.resolved["epoch_multiplier"] = cfg.scratch_epoch_multiplier;
  Adam opt;
  opt.add_group("backbone", model.backbone_parameters(), 1.0);
  train_loop(model, *data, loop_settings(cfg, schedule), opt, rec, on_epoch);
  finish_record(rec, model, *data, cfg.dtype, start);
  return rec;
}

MetricsRecord run_experiment(const ExperimentConfig& cfg, const Checkpoint* pretrained,
                             const EpochCallback& on_epoch) {
  switch (cfg.mode) {
    case RunMode::pretrain:
      return pretrain(cfg, on_epoch).metrics;
    case RunMode::scratch:
      return train_scratch(cfg, on_epoch);
    case RunMode::finetune:
      if (pretrained) return finetune(cfg, *pretrained, on_epoch);
      if (cfg.pretrained.empty()) {
        throw std::invalid_argument("finetune needs a pretrained checkpoint");
      }
      return finetune(cfg, load_checkpoint(cfg.pretrained), on_epoch);
  }
  throw std::logic_error("unreachable run mode");
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
}

}  // namespace spadapt
