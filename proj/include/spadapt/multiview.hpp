#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "spadapt/adaptors.hpp"
#include "spadapt/backbone.hpp"

namespace spadapt {

enum class ViewPool { max, mean };

std::string to_string(ViewPool pool);
ViewPool parse_view_pool(const std::string& s);

struct DiversityRegConfig {
  double alpha = 1e-2;
  /// Norm order; only the spectral norm (2) is implemented.
  int p = 2;
  int max_iter = 5000;
  /// Stop once the eigen-residual ||G u - lambda u|| <= tol * lambda.
  double tol = 1e-10;

  void validate() const;
  nlohmann::json to_json() const;
  static DiversityRegConfig from_json(const nlohmann::json& j);
  bool operator==(const DiversityRegConfig&) const = default;
};

struct PowerIterationResult {
  double lambda = 0.0;
  std::vector<double> vector;  // unit norm
  int iterations = 0;
  double residual = 0.0;  // ||G u - lambda u||
};

/// Dominant eigenpair of a symmetric positive semidefinite matrix (row-major
/// n x n), iterated until ||G u - lambda u|| <= tol * lambda. Throws
/// std::runtime_error with the residual on non-convergence.
PowerIterationResult power_iteration(std::span<const double> matrix, std::size_t n, int max_iter,
                                     double tol);

/// G = v v^T for one image's stacked views v [R, P].
Tensor gram(const Tensor& v);

/// alpha * sum over images of the spectral norm of each image's gram matrix.
/// `stacked` is [N, R, H, W]: the channel-concatenated views of N images.
Tensor diversity_reg(Graph& g, const Tensor& stacked, const DiversityRegConfig& cfg);

struct Schedule {
  double lr = 1e-4;
  std::size_t epochs = 15;
  std::vector<std::size_t> milestones;

  bool operator==(const Schedule&) const = default;
};

/// Linear scaling for shared-parameter views: lr / V, epochs and milestones x V.
Schedule scale_schedule(const Schedule& base, std::size_t num_views);

/// Per-view adaptors feeding one shared backbone, pooled elementwise after
/// block `pool_block`: y = CNN2(pool_i CNN1(view_i(x))).
class MultiViewModel {
 public:
  MultiViewModel(std::vector<Adaptor> views, Backbone backbone,
                 std::optional<std::size_t> pool_block = std::nullopt,
                 ViewPool pool = ViewPool::max);

  /// `view_outputs`, when given, receives each adaptor's output.
  Tensor forward(Graph& g, const Tensor& x, Mode mode, std::vector<Tensor>* view_outputs = nullptr);

  std::size_t num_views() const { return views_.size(); }
  std::size_t pool_block() const { return pool_block_; }
  ViewPool pool() const { return pool_; }
  std::vector<Adaptor>& views() { return views_; }
  const std::vector<Adaptor>& views() const { return views_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }

  std::vector<NamedTensor> adaptor_parameters() const;
  std::vector<NamedTensor> backbone_parameters() const { return backbone_.parameters(); }
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

 private:
  std::vector<Adaptor> views_;
  Backbone backbone_;
  std::size_t pool_block_;
  ViewPool pool_;
};

}  // namespace spadapt
