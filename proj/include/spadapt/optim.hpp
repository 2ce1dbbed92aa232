#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spadapt/tensor.hpp"

namespace spadapt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for a list of parameters plus the shared step
/// counter.
struct AdamState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update of `params` from their gradients.
///
/// `lr_scales[i]` multiplies `lr` for params[i] (empty means 1 for all).
/// Every gradient is validated before any parameter moves: a non-finite value
/// throws NonFiniteError naming the parameter and leaves params and state
/// untouched. Parameters without a gradient are treated as having zero gradient.
void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr,
               const std::vector<double>& lr_scales = {});

/// Adam over named parameter groups, each with its own learning-rate multiplier.
class Adam {
 public:
  struct Group {
    std::string name;
    std::vector<NamedTensor> params;
    double lr_scale = 1.0;
  };

  explicit Adam(AdamHyper hyper = {});

  void add_group(std::string name, std::vector<NamedTensor> params, double lr_scale);
  void step(double lr);
  void zero_grad();

  const std::vector<Group>& groups() const { return groups_; }
  const AdamState& state() const { return state_; }
  /// Learning-rate multiplier applied to the parameter called `name`.
  double lr_scale_of(const std::string& name) const;

 private:
  void rebuild_flat();

  std::vector<Group> groups_;
  std::vector<NamedTensor> flat_;
  std::vector<double> scales_;
  AdamState state_;
};

}  // namespace spadapt
