#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spadapt/training.hpp"

namespace spadapt {

/// One table cell: a JSON merge-patch over the suite's base config.
struct SuiteCell {
  std::string row;
  std::string column;
  nlohmann::json overrides = nlohmann::json::object();
};

struct SuiteConfig {
  std::string name = "suite";
  ExperimentConfig base;
  /// Produces the shared pretrained backbone when base.pretrained is empty.
  std::optional<ExperimentConfig> pretrain;
  std::vector<SuiteCell> cells;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  nlohmann::json to_json() const;
  static SuiteConfig from_json(const nlohmann::json& j);
};

/// Config of one (cell, seed) run.
ExperimentConfig cell_config(const SuiteConfig& suite, const SuiteCell& cell, std::uint64_t seed);

struct CellResult {
  SuiteCell cell;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<MetricsRecord> record;
  std::string error;
  /// True when the record was loaded from a previous run.
  bool reused = false;
};

struct CellSummary {
  std::string row, column;
  std::size_t runs = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
};

struct BenchmarkReport {
  std::vector<CellResult> results;
  std::vector<CellSummary> summary;
  std::vector<std::string> failures;
  std::string csv;
  std::string markdown;

  const CellSummary* find(const std::string& row, const std::string& column) const;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every (cell, seed) not already recorded under out_dir/records, keyed
/// by config hash, then writes results.csv and results.md. A failing cell is
/// listed in the report and does not stop the suite.
BenchmarkReport run_benchmark(const SuiteConfig& suite, const std::filesystem::path& out_dir,
                              const ProgressFn& progress = {});

/// Rebuilds the report from out_dir (suite.json plus the persisted records)
/// without training.
BenchmarkReport load_report(const std::filesystem::path& out_dir);

/// Degradation suite on an RGB dataset: the identity order, the five other
/// channel permutations, grayscale and low resolution, fine-tuned with a
/// plain (identity-adaptor) network.
SuiteConfig degradation_suite(const ExperimentConfig& base, std::vector<std::uint64_t> seeds);

struct DegradationReport {
  BenchmarkReport bench;
  /// Permutation order name -> mean accuracy; index 0 is the identity.
  std::vector<std::pair<std::string, double>> permutations;
  double identity = 0.0;
  double permuted_mean = 0.0;
  double grayscale = 0.0;
  double low_resolution = 0.0;
  std::string markdown;
};

DegradationReport degradation_study(const ExperimentConfig& base, std::vector<std::uint64_t> seeds,
                                    const std::filesystem::path& out_dir,
                                    const ProgressFn& progress = {});

/// Permutation and degradation grid markdown for a finished degradation benchmark.
DegradationReport summarize_degradation(BenchmarkReport bench);

}  // namespace spadapt
