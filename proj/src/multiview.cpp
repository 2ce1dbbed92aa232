#include "spadapt/multiview.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace spadapt {

std::string to_string(ViewPool pool) { return pool == ViewPool::max ? "max" : "mean"; }

ViewPool parse_view_pool(const std::string& s) {
  if (s == "max") return ViewPool::max;
  if (s == "mean") return ViewPool::mean;
  throw std::invalid_argument("unknown view pool '" + s + "' (expected max or mean)");
}

void DiversityRegConfig::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("diversity alpha must be >= 0");
  if (p != 2) {
    throw std::invalid_argument("diversity norm order " + std::to_string(p) +
                                " is not supported (only 2, the spectral norm)");
  }
  if (max_iter < 1) throw std::invalid_argument("diversity max_iter must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("diversity tol must be > 0");
}

nlohmann::json DiversityRegConfig::to_json() const {
  return {{"alpha", alpha}, {"p", p}, {"max_iter", max_iter}, {"tol", tol}};
}

DiversityRegConfig DiversityRegConfig::from_json(const nlohmann::json& j) {
  DiversityRegConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.p = j.value("p", c.p);
  c.max_iter = j.value("max_iter", c.max_iter);
  c.tol = j.value("tol", c.tol);
  c.validate();
  return c;
}

PowerIterationResult power_iteration(std::span<const double> G, std::size_t n, int max_iter,
                                     double tol) {
  if (G.size() != n * n) throw std::invalid_argument("power_iteration: matrix is not n x n");
  PowerIterationResult r;
  if (n == 0) return r;
  std::vector<double> v(n), w(n);
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = 1.0 + 0.1 * std::sin(static_cast<double>(i + 1));
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;

  auto matvec = [&](const std::vector<double>& in, std::vector<double>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * in[j];
      out[i] = s;
    }
  };
  auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
  };

  // v is unit norm up to rounding; dividing by v.v anyway makes lambda exactly
  // 1 when G is exactly I. The residual bounds both the eigenvalue error and
  // (through the gap) the eigenvector error.
  for (int it = 1; it <= max_iter; ++it) {
    matvec(v, w);
    r.iterations = it;
    const double lambda = dot(v, w) / dot(v, v);
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) res += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
    r.lambda = lambda;
    r.residual = std::sqrt(res);
    r.vector = v;
    const double wn = std::sqrt(dot(w, w));
    if (wn == 0.0) {
      // v lies in the null space; for a PSD matrix from the start vector this
      // means G = 0 along every direction we can reach.
      r.lambda = 0.0;
      r.residual = 0.0;
      return r;
    }
    if (r.residual <= tol * std::abs(lambda)) return r;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wn;
  }
  std::ostringstream os;
  os << "power iteration did not converge in " << max_iter << " iterations (residual "
     << r.residual << ")";
  throw std::runtime_error(os.str());
}

Tensor gram(const Tensor& v) {
  if (v.rank() != 2) throw TensorError("gram: expected [rows, pixels], got " + shape_str(v.shape()));
  const std::size_t R = v.dim(0), P = v.dim(1);
  const auto x = v.to_doubles();
  std::vector<double> G(R * R, 0.0);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = i; j < R; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < P; ++p) s += x[i * P + p] * x[j * P + p];
      G[i * R + j] = s;
      G[j * R + i] = s;
    }
  }
  return Tensor::from_doubles({R, R}, G, v.dtype());
}

Tensor diversity_reg(Graph& g, const Tensor& stacked, const DiversityRegConfig& cfg) {
  cfg.validate();
  if (stacked.rank() != 4) {
    throw TensorError("diversity_reg: expected stacked views [N,R,H,W], got " +
                      shape_str(stacked.shape()));
  }
  const std::size_t N = stacked.dim(0), R = stacked.dim(1), P = stacked.dim(2) * stacked.dim(3);
  const auto x = stacked.to_doubles();
  // Dominant eigenvector per image, kept for the backward rule.
  std::vector<double> us(N * R, 0.0);
  double total = 0.0;
  std::vector<double> G(R * R);
  for (std::size_t n = 0; n < N; ++n) {
    const double* v = x.data() + n * R * P;
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = i; j < R; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < P; ++p) s += v[i * P + p] * v[j * P + p];
        G[i * R + j] = s;
        G[j * R + i] = s;
      }
    }
    const auto pi = power_iteration(G, R, cfg.max_iter, cfg.tol);
    total += pi.lambda;
    const double un = std::sqrt(std::inner_product(pi.vector.begin(), pi.vector.end(),
                                                   pi.vector.begin(), 0.0));
    for (std::size_t i = 0; i < R; ++i) us[n * R + i] = pi.vector[i] / un;
  }
  Tensor out = Tensor::scalar(cfg.alpha * total, stacked.dtype());
  check_finite(out, "diversity_reg");

  if (g.tracks({&stacked})) {
    const double alpha = cfg.alpha;
    g.record("diversity_reg", out, [stacked, out, us, alpha, N, R, P]() {
      dispatch(stacked.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const double gy = static_cast<double>(out.grad<T>()[0]);
        const auto v = stacked.values<T>();
        auto gx = stacked.mutable_grad<T>();
        std::vector<double> uv(P);
        for (std::size_t n = 0; n < N; ++n) {
          const T* vn = v.data() + n * R * P;
          const double* u = us.data() + n * R;
          // d lambda / d v = 2 u (u^T v)
          std::fill(uv.begin(), uv.end(), 0.0);
          for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t p = 0; p < P; ++p) uv[p] += u[i] * static_cast<double>(vn[i * P + p]);
          }
          T* gn = gx.data() + n * R * P;
          for (std::size_t i = 0; i < R; ++i) {
            const double c = gy * alpha * 2.0 * u[i];
            for (std::size_t p = 0; p < P; ++p) gn[i * P + p] += static_cast<T>(c * uv[p]);
          }
        }
      });
    });
  }
  return out;
}

Schedule scale_schedule(const Schedule& base, std::size_t num_views) {
  if (num_views == 0) throw std::invalid_argument("scale_schedule: num_views must be >= 1");
  Schedule s = base;
  s.lr = base.lr / static_cast<double>(num_views);
  s.epochs = base.epochs * num_views;
  for (auto& m : s.milestones) m *= num_views;
  return s;
}

// ---------------------------------------------------------------------------

MultiViewModel::MultiViewModel(std::vector<Adaptor> views, Backbone backbone,
                               std::optional<std::size_t> pool_block, ViewPool pool)
    : views_(std::move(views)),
      backbone_(std::move(backbone)),
      pool_block_(pool_block.value_or(backbone_.default_pool_block())),
      pool_(pool) {
  if (views_.empty()) throw std::invalid_argument("multi-view model needs at least one view");
  if (pool_block_ >= backbone_.num_blocks()) {
    throw std::invalid_argument("pool_block " + std::to_string(pool_block_) +
                                " out of range for a " + std::to_string(backbone_.num_blocks()) +
                                "-block backbone");
  }
  const std::size_t k = views_.front().spec().k_in;
  for (const auto& v : views_) {
    if (v.spec().k_in != k) throw std::invalid_argument("all views must accept the same k");
    if (v.out_channels() != backbone_.arch().input_channels) {
      throw std::invalid_argument(to_string(v.spec().kind) + " adaptor emits " +
                                  std::to_string(v.out_channels()) + " channels, backbone takes " +
                                  std::to_string(backbone_.arch().input_channels));
    }
  }
}

Tensor MultiViewModel::forward(Graph& g, const Tensor& x, Mode mode,
                               std::vector<Tensor>* view_outputs) {
  std::vector<Tensor> outs;
  outs.reserve(views_.size());
  for (auto& view : views_) {
    outs.push_back(view.apply(g, x, mode));
    if (view_outputs) view_outputs->push_back(outs.back());
  }
  const std::vector<Tensor> acts = backbone_.forward_until_views(g, outs, mode, pool_block_);
  Tensor pooled = acts.front();
  if (acts.size() > 1) {
    pooled = pool_ == ViewPool::max ? elementwise_max(g, acts) : elementwise_mean(g, acts);
  }
  return backbone_.forward_from(g, pooled, mode, pool_block_);
}

std::vector<NamedTensor> MultiViewModel::adaptor_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < views_.size(); ++i) {
    for (auto& p : views_[i].parameters("view" + std::to_string(i) + ".")) out.push_back(p);
  }
  return out;
}

std::vector<NamedTensor> MultiViewModel::parameters() const {
  auto out = adaptor_parameters();
  for (auto& p : backbone_.parameters()) out.push_back(p);
  return out;
}

std::size_t MultiViewModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace spadapt
