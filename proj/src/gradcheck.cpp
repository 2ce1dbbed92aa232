#include "spadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace spadapt {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_err);
  return w;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << e.name << ": rel " << e.max_rel_err << " abs " << e.max_abs_err << '\n';
  }
  return os.str();
}

namespace {

double evaluate(const std::function<Tensor(Graph&)>& fn) {
  Graph g(Graph::Mode::no_grad);
  return fn(g).item();
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(Graph&)>& fn,
                                  std::vector<NamedTensor> params, double h, double tolerance,
                                  double denom_floor, std::size_t max_per_tensor,
                                  std::uint64_t sample_seed) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.clear_grad();
  }
  {
    Graph g;
    Tensor out = fn(g);
    g.backward(out);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& p : params) {
    const auto analytic = p.tensor.grad_doubles();
    GradCheckEntry entry{p.name, 0.0, 0.0};
    dispatch(p.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p.tensor.mutable_values<T>();
      std::vector<std::size_t> idx(w.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      if (max_per_tensor > 0 && idx.size() > max_per_tensor) {
        std::mt19937_64 rng(sample_seed ^ std::hash<std::string>{}(p.name));
        for (std::size_t j = 0; j < max_per_tensor; ++j) {
          std::uniform_int_distribution<std::size_t> pick(j, idx.size() - 1);
          std::swap(idx[j], idx[pick(rng)]);
        }
        idx.resize(max_per_tensor);
      }
      for (const std::size_t i : idx) {
        const T orig = w[i];
        w[i] = static_cast<T>(orig + h);
        const double up = evaluate(fn);
        w[i] = static_cast<T>(orig - h);
        const double down = evaluate(fn);
        w[i] = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double abs_err = std::abs(analytic[i] - numeric);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denom_floor});
        entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
        entry.max_rel_err = std::max(entry.max_rel_err, abs_err / denom);
      }
    });
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace spadapt
