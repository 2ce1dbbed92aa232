#include "spadapt/optim.hpp"

#include <cmath>

namespace spadapt {

void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr,
               const std::vector<double>& lr_scales) {
  if (!lr_scales.empty() && lr_scales.size() != params.size()) {
    throw TensorError("adam_step: lr_scales must match the parameter count");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw TensorError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                      " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].tensor.numel()) {
      throw TensorError("adam_step: moment shape mismatch for " + params[i].name);
    }
    for (double g : params[i].tensor.grad_doubles()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError("adam_step: non-finite gradient in parameter '" + params[i].name +
                             "'");
      }
    }
  }

  state.step += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    if (!p.has_grad()) continue;
    const double step_lr = lr * (lr_scales.empty() ? 1.0 : lr_scales[i]);
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const auto g = p.grad<T>();
      auto w = p.mutable_values<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        if (gj == 0.0 && m[j] == 0.0 && v[j] == 0.0) continue;
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] = static_cast<T>(w[j] - step_lr * mhat / (std::sqrt(vhat) + h.eps));
      }
    });
  }
}

Adam::Adam(AdamHyper hyper) { state_.hyper = hyper; }

void Adam::add_group(std::string name, std::vector<NamedTensor> params, double lr_scale) {
  if (state_.step > 0) throw TensorError("Adam: cannot add groups after the first step");
  groups_.push_back({std::move(name), std::move(params), lr_scale});
  rebuild_flat();
}

void Adam::rebuild_flat() {
  flat_.clear();
  scales_.clear();
  for (const auto& grp : groups_) {
    for (const auto& p : grp.params) {
      flat_.push_back(p);
      scales_.push_back(grp.lr_scale);
    }
  }
  state_.first_moment.clear();
  state_.second_moment.clear();
}

void Adam::step(double lr) { adam_step(flat_, state_, lr, scales_); }

void Adam::zero_grad() {
  for (auto& p : flat_) p.tensor.zero_grad();
}

double Adam::lr_scale_of(const std::string& name) const {
  for (const auto& grp : groups_) {
    for (const auto& p : grp.params) {
      if (p.name == name) return grp.lr_scale;
    }
  }
  throw TensorError("Adam: no parameter named '" + name + "'");
}

}  // namespace spadapt
