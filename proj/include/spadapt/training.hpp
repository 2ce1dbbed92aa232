#pragma once

#include <functional>
#include <string>

#include "spadapt/config.hpp"

namespace spadapt {

/// Called after every epoch with (epoch index, record so far).
using EpochCallback = std::function<void(std::size_t, const MetricsRecord&)>;

struct PretrainResult {
  Checkpoint checkpoint;
  MetricsRecord metrics;
};

/// Trains a 3-channel backbone from scratch on the configured dataset.
PretrainResult pretrain(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {});

/// Replaces the head of `pretrained`, builds the configured adaptor views
/// and trains adaptors and backbone jointly (two learning-rate groups).
MetricsRecord finetune(const ExperimentConfig& cfg, const Checkpoint& pretrained,
                       const EpochCallback& on_epoch = {});

/// Fresh network whose first layer takes k channels, trained for
/// scratch_epoch_multiplier times the configured epochs.
MetricsRecord train_scratch(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {});

/// Dispatches on cfg.mode; finetune loads cfg.pretrained unless `pretrained`
/// is given.
MetricsRecord run_experiment(const ExperimentConfig& cfg, const Checkpoint* pretrained = nullptr,
                             const EpochCallback& on_epoch = {});

/// The resolved adaptor views for `cfg` on `data` (initialization included).
std::vector<Adaptor> build_views(const ExperimentConfig& cfg, const Dataset& data);

/// Optimizer with an "adaptor" group at lr * multiplier and a "backbone"
/// group at lr (frozen backbone layers excluded).
Adam build_optimizer(const MultiViewModel& model, const ExperimentConfig& cfg);

/// Learning rate for `epoch` under step decay at each milestone.
double scheduled_lr(const Schedule& s, double decay, std::size_t epoch);

/// Accuracy (percent) of `model` on `images` in eval mode.
double evaluate(MultiViewModel& model, const std::vector<HyperImage>& images, DType dtype,
                std::size_t batch_size = 128);

/// Raises the allocator's mmap/trim thresholds so the training loop reuses
/// heap pages instead of faulting fresh ones for every large tensor.
void tune_allocator();

}  // namespace spadapt
