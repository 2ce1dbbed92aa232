#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spadapt/adaptors.hpp"
#include "spadapt/dataproc.hpp"
#include "spadapt/multiview.hpp"

namespace spadapt {

enum class RunMode { pretrain, finetune, scratch };
std::string to_string(RunMode mode);
RunMode parse_run_mode(const std::string& s);

/// Where a run's data comes from: a dataset directory, or a toy recipe plus
/// an optional channel expansion and transform chain.
struct DatasetRef {
  std::string path;
  ToyDatasetParams toy;
  /// 0 keeps the RGB images; otherwise expand to this many channels.
  std::size_t expand_k = 0;
  std::uint64_t expand_seed = 0;
  /// Applied in order after expansion: "permute:2,1,0", "grayscale", "lowres:4".
  std::vector<std::string> transforms;

  nlohmann::json to_json() const;
  static DatasetRef from_json(const nlohmann::json& j);
};

struct OptimizerConfig {
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 15;
  std::vector<std::size_t> milestones{7};
  double decay = 0.1;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  std::string name = "experiment";
  RunMode mode = RunMode::finetune;
  DatasetRef dataset;
  /// Template for every view; view i gets a seed derived from (seed, i). A
  /// k_in of 0 means "the dataset's channel count".
  AdaptorSpec adaptor{.kind = AdaptorKind::identity, .k_in = 0};
  std::size_t num_views = 1;
  /// Unset means the backbone's last block.
  std::optional<std::size_t> pool_block;
  ViewPool pool = ViewPool::max;
  bool diversity = false;
  DiversityRegConfig diversity_cfg;
  OptimizerConfig optimizer;
  double adaptor_lr_multiplier = 10.0;
  std::size_t scratch_epoch_multiplier = 17;
  /// Linear scaling rule for multi-view runs.
  bool scale_views = true;
  std::uint64_t seed = 0;
  bool hflip = true;
  bool rotations = false;
  std::vector<std::size_t> widths{16, 32, 64};
  DType dtype = DType::f32;
  /// Checkpoint file for finetune mode (the harness may supply it instead).
  std::string pretrained;
  /// Train only the classifier head (and the adaptor).
  bool freeze_backbone = false;
  AutoencoderConfig autoencoder;
  std::size_t pca_pixels = 20000;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// FNV-1a 64 of the canonical (sorted-key, compact) JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& text);

struct MetricsRecord {
  std::string config_hash;
  nlohmann::json config;
  /// Effective schedule and derived quantities (scaled lr/epochs, multipliers).
  nlohmann::json resolved;
  std::vector<double> train_loss;
  std::vector<double> test_accuracy;  // percent
  std::vector<double> epoch_seconds;
  double final_accuracy = 0.0;
  double wall_seconds = 0.0;
  /// Run-specific measurements: parameter counts, adaptor drift, and so on.
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
  /// Equality of everything except wall-clock timings.
  bool same_results(const MetricsRecord& other) const;
};

void save_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json load_json(const std::filesystem::path& path);

/// Resolves (and caches by recipe) the dataset a config refers to.
std::shared_ptr<const Dataset> resolve_dataset(const DatasetRef& ref);
void clear_dataset_cache();

}  // namespace spadapt
