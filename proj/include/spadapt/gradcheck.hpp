#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spadapt/graph.hpp"
#include "spadapt/optim.hpp"

namespace spadapt {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double worst() const;
  bool passed() const { return worst() <= tolerance; }
  std::string summary() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, element by element.
///
/// `fn` must build its result on the supplied graph from `params` (float64
/// recommended). Relative error is |a - n| / max(|a|, |n|, denom_floor), so
/// gradients near zero are judged on an absolute scale of `denom_floor`.
/// A nonzero `max_per_tensor` checks that many randomly chosen elements of
/// each larger tensor instead of all of them.
GradCheckReport finite_diff_check(const std::function<Tensor(Graph&)>& fn,
                                  std::vector<NamedTensor> params, double h = 1e-5,
                                  double tolerance = 1e-6, double denom_floor = 1e-3,
                                  std::size_t max_per_tensor = 0, std::uint64_t sample_seed = 0);

}  // namespace spadapt
