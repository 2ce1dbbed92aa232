#include "spadapt/dataproc.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>

#include "seed.hpp"
#include "spadapt/tensor_io.hpp"

namespace spadapt {

nlohmann::json ColorCenters::to_json() const {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& p : centers) c.push_back({p[0], p[1], p[2]});
  return {{"centers", c}, {"seed", seed}, {"iterations", iterations}, {"objective", objective}};
}

ColorCenters ColorCenters::from_json(const nlohmann::json& j) {
  ColorCenters cc;
  for (const auto& p : j.at("centers")) {
    cc.centers.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
  }
  cc.seed = j.value("seed", std::uint64_t{0});
  cc.iterations = j.value("iterations", std::size_t{0});
  cc.objective = j.value("objective", 0.0);
  return cc;
}

// ---------------------------------------------------------------------------

namespace {

using Point = std::array<double, 3>;

double sqdist(const Point& a, const Point& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct LloydResult {
  std::vector<Point> centers;
  std::size_t iterations = 0;
  double objective = 0.0;
};

std::vector<Point> kmeanspp_seed(const std::vector<Point>& X, std::size_t k, std::mt19937_64& rng) {
  const std::size_t M = X.size();
  std::vector<Point> c;
  std::uniform_int_distribution<std::size_t> first(0, M - 1);
  c.push_back(X[first(rng)]);
  std::vector<double> d2(M);
  for (std::size_t i = 0; i < M; ++i) d2[i] = sqdist(X[i], c[0]);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  while (c.size() < k) {
    double total = 0.0;
    for (double d : d2) total += d;
    std::size_t pick = 0;
    const double target = u01(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      if (d2[i] <= 0.0) continue;
      acc += d2[i];
      pick = i;
      if (acc >= target) break;
    }
    c.push_back(X[pick]);
    for (std::size_t i = 0; i < M; ++i) d2[i] = std::min(d2[i], sqdist(X[i], c.back()));
  }
  return c;
}

// Single-point moves on top of a Lloyd fixed point: x leaves cluster a for b
// when n_a/(n_a-1) |x-c_a|^2 > n_b/(n_b+1) |x-c_b|^2, which strictly lowers
// the objective. Lloyd-stable partitions are often not move-stable.
void hartigan_refine(const std::vector<Point>& X, std::vector<Point>& centers,
                     std::vector<std::size_t>& assign, std::size_t max_passes) {
  const std::size_t M = X.size(), k = centers.size();
  if (k < 2) return;
  std::vector<std::size_t> counts(k, 0);
  for (auto a : assign) ++counts[a];
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool moved = false;
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t a = assign[i];
      if (counts[a] < 2) continue;
      const double na = static_cast<double>(counts[a]);
      const double remove_gain = na / (na - 1.0) * sqdist(X[i], centers[a]);
      std::size_t best = a;
      double best_cost = remove_gain;
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a) continue;
        const double nb = static_cast<double>(counts[b]);
        const double cost = nb / (nb + 1.0) * sqdist(X[i], centers[b]);
        if (cost < best_cost * (1.0 - 1e-12)) {
          best_cost = cost;
          best = b;
        }
      }
      if (best == a) continue;
      const double nb = static_cast<double>(counts[best]);
      for (int d = 0; d < 3; ++d) {
        centers[a][d] = (centers[a][d] * na - X[i][d]) / (na - 1.0);
        centers[best][d] = (centers[best][d] * nb + X[i][d]) / (nb + 1.0);
      }
      --counts[a];
      ++counts[best];
      assign[i] = best;
      moved = true;
    }
    if (!moved) break;
  }
  // Recompute means exactly to drop the incremental rounding.
  std::vector<Point> sums(k, Point{0, 0, 0});
  for (std::size_t i = 0; i < M; ++i) {
    for (int d = 0; d < 3; ++d) sums[assign[i]][d] += X[i][d];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] == 0) continue;
    for (int d = 0; d < 3; ++d) centers[j][d] = sums[j][d] / static_cast<double>(counts[j]);
  }
}

LloydResult lloyd(const std::vector<Point>& X, std::vector<Point> centers, std::size_t max_iter) {
  const std::size_t M = X.size(), k = centers.size();
  std::vector<std::size_t> assign(M, k);
  LloydResult r;
  auto nearest = [&](const Point& p) {
    std::size_t best = 0;
    double bd = sqdist(p, centers[0]);
    for (std::size_t j = 1; j < k; ++j) {
      const double d = sqdist(p, centers[j]);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    return best;
  };
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < M; ++i) {
      const auto a = nearest(X[i]);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    r.iterations = it + 1;
    std::vector<Point> sums(k, Point{0, 0, 0});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < M; ++i) {
      for (int d = 0; d < 3; ++d) sums[assign[i]][d] += X[i][d];
      ++counts[assign[i]];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      for (int d = 0; d < 3; ++d) centers[j][d] = sums[j][d] / static_cast<double>(counts[j]);
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      // Reseed an emptied cluster at the point farthest from its center.
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < M; ++i) {
        const double d = sqdist(X[i], centers[assign[i]]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      --counts[assign[far]];
      centers[j] = X[far];
      assign[far] = j;
      counts[j] = 1;
    }
  }
  hartigan_refine(X, centers, assign, max_iter);
  r.objective = 0.0;
  for (const auto& p : X) r.objective += sqdist(p, centers[nearest(p)]);
  r.centers = std::move(centers);
  return r;
}

}  // namespace

ColorCenters kmeans(const Tensor& pixels, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& opts) {
  if (pixels.rank() != 2 || pixels.dim(1) != 3) {
    throw std::invalid_argument("kmeans: pixels must be [M,3], got " + shape_str(pixels.shape()));
  }
  if (k == 0) throw std::invalid_argument("kmeans: k must be positive");
  const auto v = pixels.to_doubles();
  std::vector<Point> X(pixels.dim(0));
  for (std::size_t i = 0; i < X.size(); ++i) X[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  const std::set<Point> distinct(X.begin(), X.end());
  if (distinct.size() < k) {
    throw std::invalid_argument("kmeans: " + std::to_string(distinct.size()) +
                                " distinct pixels, need at least k=" + std::to_string(k));
  }
  LloydResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (std::size_t run = 0; run < std::max<std::size_t>(1, opts.n_init); ++run) {
    std::mt19937_64 rng(detail::derive_seed(seed, {run}));
    auto r = lloyd(X, kmeanspp_seed(X, k, rng), opts.max_iter);
    if (r.objective < best.objective) best = std::move(r);
  }
  ColorCenters cc;
  cc.centers = std::move(best.centers);
  cc.seed = seed;
  cc.iterations = best.iterations;
  cc.objective = best.objective;
  return cc;
}

// ---------------------------------------------------------------------------

Tensor expand_channels(const Tensor& rgb, const ColorCenters& centers, DType dtype) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw std::invalid_argument("expand_channels: expected [3,H,W], got " + shape_str(rgb.shape()));
  }
  const std::size_t k = centers.k(), P = rgb.dim(1) * rgb.dim(2);
  if (k == 0) throw std::invalid_argument("expand_channels: no centers");
  const auto x = rgb.to_doubles();
  std::vector<double> out(k * P);
  for (std::size_t p = 0; p < P; ++p) {
    const Point f{x[p], x[P + p], x[2 * P + p]};
    for (std::size_t i = 0; i < k; ++i) out[i * P + p] = std::exp(-sqdist(f, centers.centers[i]));
  }
  return Tensor::from_doubles({k, rgb.dim(1), rgb.dim(2)}, out, dtype);
}

HyperImage expand_channels(const HyperImage& rgb, const ColorCenters& centers) {
  return {expand_channels(rgb.data, centers, rgb.data.dtype()), rgb.label, rgb.source_id};
}

Tensor invert_expansion(const Tensor& expanded, const ColorCenters& centers) {
  const std::size_t k = centers.k();
  if (expanded.rank() != 3 || expanded.dim(0) != k) {
    throw std::invalid_argument("invert_expansion: expected [" + std::to_string(k) +
                                ",H,W], got " + shape_str(expanded.shape()));
  }
  if (k < 4) {
    throw std::invalid_argument("invert_expansion: needs k >= 4 centers, got " + std::to_string(k));
  }
  Eigen::MatrixXd A(static_cast<Eigen::Index>(k), 4);
  Eigen::VectorXd cnorm(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    const auto& c = centers.centers[i];
    const auto r = static_cast<Eigen::Index>(i);
    A(r, 0) = -2 * c[0];
    A(r, 1) = -2 * c[1];
    A(r, 2) = -2 * c[2];
    A(r, 3) = 1.0;
    cnorm(r) = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) {
    throw std::invalid_argument(
        "invert_expansion: degenerate center configuration (centers do not span 3-space, "
        "affine rank " + std::to_string(qr.rank() - 1) + ")");
  }
  const std::size_t P = expanded.dim(1) * expanded.dim(2);
  const auto f = expanded.to_doubles();
  std::vector<double> out(3 * P);
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(k));
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      const double fi = f[i * P + p];
      if (!(fi > 0.0)) {
        throw std::invalid_argument("invert_expansion: channel value must be positive");
      }
      rhs(static_cast<Eigen::Index>(i)) = -std::log(fi) - cnorm(static_cast<Eigen::Index>(i));
    }
    const Eigen::VectorXd sol = qr.solve(rhs);
    for (int d = 0; d < 3; ++d) out[static_cast<std::size_t>(d) * P + p] = sol(d);
  }
  return Tensor::from_doubles({3, expanded.dim(1), expanded.dim(2)}, out, expanded.dtype());
}

// ---------------------------------------------------------------------------

namespace {

void require_image(const Tensor& img, const char* op) {
  if (img.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected [k,H,W], got " +
                                shape_str(img.shape()));
  }
}

}  // namespace

Tensor permute_channels(const Tensor& img, std::span<const std::size_t> perm) {
  require_image(img, "permute_channels");
  const std::size_t k = img.dim(0), P = img.dim(1) * img.dim(2);
  if (perm.size() != k) {
    throw std::invalid_argument("permute_channels: permutation has " +
                                std::to_string(perm.size()) + " entries for " + std::to_string(k) +
                                " channels");
  }
  std::vector<bool> seen(k, false);
  for (auto p : perm) {
    if (p >= k || seen[p]) throw std::invalid_argument("permute_channels: not a permutation");
    seen[p] = true;
  }
  Tensor out(img.shape(), img.dtype());
  dispatch(img.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = img.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t c = 0; c < k; ++c) {
      std::copy_n(src.data() + perm[c] * P, P, dst.data() + c * P);
    }
  });
  return out;
}

Tensor to_grayscale(const Tensor& img) {
  require_image(img, "to_grayscale");
  if (img.dim(0) != 3) {
    throw std::invalid_argument("to_grayscale: needs 3 channels, got " + std::to_string(img.dim(0)));
  }
  const std::size_t P = img.dim(1) * img.dim(2);
  Tensor out(img.shape(), img.dtype());
  dispatch(img.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = img.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t p = 0; p < P; ++p) {
      const double y = kBt601[0] * src[p] + kBt601[1] * src[P + p] + kBt601[2] * src[2 * P + p];
      for (std::size_t c = 0; c < 3; ++c) dst[c * P + p] = static_cast<T>(y);
    }
  });
  return out;
}

Tensor low_resolution(const Tensor& img, std::size_t factor) {
  require_image(img, "low_resolution");
  if (factor == 0) throw std::invalid_argument("low_resolution: factor must be positive");
  const std::size_t K = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out(img.shape(), img.dtype());
  dispatch(img.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = img.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t c = 0; c < K; ++c) {
      for (std::size_t by = 0; by < H; by += factor) {
        for (std::size_t bx = 0; bx < W; bx += factor) {
          const std::size_t ey = std::min(H, by + factor), ex = std::min(W, bx + factor);
          double s = 0.0;
          for (std::size_t y = by; y < ey; ++y) {
            for (std::size_t x = bx; x < ex; ++x) s += src[(c * H + y) * W + x];
          }
          const T mean = static_cast<T>(s / static_cast<double>((ey - by) * (ex - bx)));
          for (std::size_t y = by; y < ey; ++y) {
            for (std::size_t x = bx; x < ex; ++x) dst[(c * H + y) * W + x] = mean;
          }
        }
      }
    }
  });
  return out;
}

Tensor hflip(const Tensor& img) {
  require_image(img, "hflip");
  const std::size_t K = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor out(img.shape(), img.dtype());
  dispatch(img.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = img.values<T>();
    auto dst = out.mutable_values<T>();
    for (std::size_t r = 0; r < K * H; ++r) {
      std::reverse_copy(src.data() + r * W, src.data() + (r + 1) * W, dst.data() + r * W);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json ToyDatasetParams::to_json() const {
  return {{"seed", seed},
          {"classes", classes},
          {"per_class", per_class},
          {"test_per_class", test_per_class},
          {"image_size", image_size},
          {"class_offset", class_offset}};
}

ToyDatasetParams ToyDatasetParams::from_json(const nlohmann::json& j) {
  ToyDatasetParams p;
  p.seed = j.value("seed", p.seed);
  p.classes = j.value("classes", p.classes);
  p.per_class = j.value("per_class", p.per_class);
  p.test_per_class = j.value("test_per_class", p.test_per_class);
  p.image_size = j.value("image_size", p.image_size);
  p.class_offset = j.value("class_offset", p.class_offset);
  return p;
}

namespace {

constexpr const char* kShapeNames[kToyShapes] = {"disk", "square", "triangle", "cross",
                                                  "ring", "bar",    "star",     "halfdisk"};

struct PaletteColor {
  const char* name;
  Point rgb;
};

constexpr PaletteColor kPalette[kToyColors] = {
    {"red", {0.85, 0.20, 0.15}},    {"green", {0.25, 0.70, 0.20}},
    {"blue", {0.20, 0.35, 0.85}},   {"yellow", {0.90, 0.80, 0.20}},
    {"purple", {0.55, 0.25, 0.70}}, {"orange", {0.95, 0.55, 0.15}},
    {"teal", {0.15, 0.60, 0.60}},   {"pink", {0.95, 0.55, 0.70}},
};

bool inside_shape(std::size_t shape, double u, double v) {
  switch (shape) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: {
      // Equilateral triangle inscribed in the unit circle.
      for (int i = 0; i < 3; ++i) {
        const double a = std::numbers::pi / 2 + 2 * std::numbers::pi * i / 3 + std::numbers::pi;
        if (std::cos(a) * u + std::sin(a) * v > 0.5) return false;
      }
      return true;
    }
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) ||
             (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 5:
      return std::abs(u) <= 0.95 && std::abs(v) <= 0.35;
    case 6: {
      // Five-pointed star: radius oscillates between 0.45 and 1 with the angle.
      const double r = std::sqrt(u * u + v * v);
      const double a = std::atan2(v, u);
      const double t = std::abs(std::remainder(a, 2 * std::numbers::pi / 5)) / (std::numbers::pi / 5);
      return r <= 1.0 - 0.55 * t;
    }
    default:
      return u * u + v * v <= 1.0 && v >= -0.1;
  }
}

Tensor render_toy_image(std::size_t global_class, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t shape = global_class % kToyShapes;
  const Point base = kPalette[(global_class / kToyShapes) % kToyColors].rgb;
  const double S = static_cast<double>(size);

  // Textured background: tinted gray plus two oriented gratings.
  const double level = uni(0.1, 0.3);
  Point tint{};
  for (auto& t : tint) t = uni(-0.02, 0.02);
  struct Grating {
    double fx, fy, phase, amp;
  } gratings[2];
  for (auto& gr : gratings) {
    const double freq = uni(1.0, 3.0) * 2 * std::numbers::pi / S;
    const double ang = uni(0.0, std::numbers::pi);
    gr = {freq * std::cos(ang), freq * std::sin(ang), uni(0.0, 2 * std::numbers::pi), uni(0.03, 0.08)};
  }

  // Achromatic clutter under the object.
  struct Blob {
    double cx, cy, r, level;
    std::size_t shape;
  } blobs[2];
  for (auto& b : blobs) {
    b = {uni(0.0, S), uni(0.0, S), uni(0.08, 0.14) * S, uni(0.1, 0.9), rng() % kToyShapes};
  }

  const double cx = S / 2 + uni(-0.18, 0.18) * S, cy = S / 2 + uni(-0.18, 0.18) * S;
  const double radius = uni(0.18, 0.34) * S;
  const double theta = uni(0.0, 2 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double brightness = uni(0.85, 1.1);
  Point color{};
  for (int c = 0; c < 3; ++c) color[c] = std::clamp(base[c] * brightness + 0.04 * gauss(rng), 0.0, 1.0);
  const double shade_x = uni(-0.05, 0.05), shade_y = uni(-0.05, 0.05);

  std::vector<double> px(3 * size * size);
  const std::size_t P = size * size;
  constexpr int kSub = 4;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      int blob_hits[2] = {0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px_x = static_cast<double>(x) + (sx + 0.5) / kSub;
          const double px_y = static_cast<double>(y) + (sy + 0.5) / kSub;
          const double qx = px_x - cx, qy = px_y - cy;
          const double u = (ct * qx + st * qy) / radius, v = (-st * qx + ct * qy) / radius;
          hits += inside_shape(shape, u, v) ? 1 : 0;
          for (int b = 0; b < 2; ++b) {
            const auto& bl = blobs[b];
            blob_hits[b] += inside_shape(bl.shape, (px_x - bl.cx) / bl.r, (px_y - bl.cy) / bl.r) ? 1 : 0;
          }
        }
      }
      const double alpha = hits / static_cast<double>(kSub * kSub);
      double tex = 0.0;
      for (const auto& gr : gratings) {
        tex += gr.amp * std::sin(gr.fx * static_cast<double>(x) + gr.fy * static_cast<double>(y) + gr.phase);
      }
      const double dx = (static_cast<double>(x) - cx) / S, dy = (static_cast<double>(y) - cy) / S;
      for (int c = 0; c < 3; ++c) {
        double bg = level + tint[c] + tex;
        for (int b = 0; b < 2; ++b) {
          const double a = blob_hits[b] / static_cast<double>(kSub * kSub);
          bg = a * blobs[b].level + (1 - a) * bg;
        }
        const double fg = color[c] + shade_x * dx * 4 + shade_y * dy * 4;
        const double val = alpha * fg + (1 - alpha) * bg + 0.03 * gauss(rng);
        px[static_cast<std::size_t>(c) * P + y * size + x] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  return Tensor::from_doubles({3, size, size}, px, DType::f32);
}

}  // namespace

std::string toy_class_name(std::size_t global_class) {
  return std::string(kPalette[(global_class / kToyShapes) % kToyColors].name) + "_" +
         kShapeNames[global_class % kToyShapes];
}

Dataset gen_toy_color_dataset(const ToyDatasetParams& params) {
  if (params.classes == 0) throw std::invalid_argument("toy dataset needs at least one class");
  if (params.class_offset + params.classes > kToyShapes * kToyColors) {
    throw std::invalid_argument("toy dataset has " + std::to_string(kToyShapes * kToyColors) +
                                " distinct classes; offset + classes exceeds that");
  }
  if (params.image_size < 4) throw std::invalid_argument("toy image_size must be >= 4");
  Dataset d;
  d.name = "toy";
  d.channels = 3;
  for (std::size_t c = 0; c < params.classes; ++c) {
    d.class_names.push_back(toy_class_name(params.class_offset + c));
  }
  auto make_split = [&](std::size_t per_class, std::uint64_t split, const char* tag,
                        std::vector<HyperImage>& out) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < params.classes; ++c) {
        const std::size_t g = params.class_offset + c;
        const auto s = detail::derive_seed(params.seed, {split, g, i});
        char id[64];
        std::snprintf(id, sizeof id, "%s/%s/%05zu", tag, toy_class_name(g).c_str(), i);
        out.push_back({render_toy_image(g, params.image_size, s), static_cast<int>(c), id});
      }
    }
  };
  make_split(params.per_class, 0, "train", d.train);
  make_split(params.test_per_class, 1, "test", d.test);
  d.generation = {{"recipe", "toy"}, {"params", params.to_json()}, {"transforms", nlohmann::json::array()}};
  return d;
}

Tensor sample_pixels(const Dataset& rgb, std::size_t max_pixels, std::uint64_t seed) {
  if (rgb.channels != 3) throw std::invalid_argument("sample_pixels: dataset must be RGB");
  if (rgb.train.empty()) throw std::invalid_argument("sample_pixels: empty training split");
  const std::size_t P = rgb.train.front().data.dim(1) * rgb.train.front().data.dim(2);
  const std::size_t total = rgb.train.size() * P;
  std::vector<double> out;
  std::mt19937_64 rng(seed);
  const std::size_t M = std::min(max_pixels, total);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  out.reserve(3 * M);
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t flat = M == total ? i : pick(rng);
    const auto& img = rgb.train[flat / P].data;
    const std::size_t p = flat % P;
    for (std::size_t c = 0; c < 3; ++c) out.push_back(img.at(c * P + p));
  }
  return Tensor::from_doubles({M, 3}, out, DType::f64);
}

Dataset expand_dataset(const Dataset& rgb, std::size_t k, std::uint64_t seed,
                       std::size_t max_pixels) {
  const auto centers = kmeans(sample_pixels(rgb, max_pixels, seed), k, seed);
  Dataset d;
  d.name = rgb.name + "_k" + std::to_string(k);
  d.class_names = rgb.class_names;
  d.channels = k;
  for (const auto& im : rgb.train) d.train.push_back(expand_channels(im, centers));
  for (const auto& im : rgb.test) d.test.push_back(expand_channels(im, centers));
  d.generation = rgb.generation;
  d.generation["transforms"].push_back(
      {{"op", "expand"}, {"k", k}, {"seed", seed}, {"max_pixels", max_pixels},
       {"centers", centers.to_json()}});
  return d;
}

namespace {

template <typename Fn>
Dataset map_dataset(const Dataset& d, const nlohmann::json& step, std::size_t channels, Fn fn) {
  Dataset out;
  out.name = d.name;
  out.class_names = d.class_names;
  out.channels = channels;
  for (const auto& im : d.train) out.train.push_back({fn(im.data), im.label, im.source_id});
  for (const auto& im : d.test) out.test.push_back({fn(im.data), im.label, im.source_id});
  out.generation = d.generation;
  out.generation["transforms"].push_back(step);
  return out;
}

}  // namespace

Dataset permute_dataset(const Dataset& d, std::span<const std::size_t> perm) {
  std::vector<std::size_t> p(perm.begin(), perm.end());
  return map_dataset(d, {{"op", "permute"}, {"perm", p}}, d.channels,
                     [&](const Tensor& t) { return permute_channels(t, p); });
}

Dataset grayscale_dataset(const Dataset& d) {
  return map_dataset(d, {{"op", "grayscale"}, {"weights", kBt601}}, 3,
                     [](const Tensor& t) { return to_grayscale(t); });
}

Dataset low_resolution_dataset(const Dataset& d, std::size_t factor) {
  return map_dataset(d, {{"op", "low_resolution"}, {"factor", factor}}, d.channels,
                     [&](const Tensor& t) { return low_resolution(t, factor); });
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json samples = nlohmann::json::array();
  auto emit = [&](const std::vector<HyperImage>& split, const char* tag) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "images/%s_%06zu.spat", tag, i);
      save_tensor(dir / name, split[i].data);
      samples.push_back({{"path", name},
                         {"label", split[i].label},
                         {"split", tag},
                         {"source_id", split[i].source_id}});
    }
  };
  emit(d.train, "train");
  emit(d.test, "test");
  const nlohmann::json manifest{{"name", d.name},
                                {"classes", d.class_names},
                                {"channels", d.channels},
                                {"generation", d.generation},
                                {"samples", samples}};
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  os << manifest.dump(1) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json", std::ios::binary);
  if (!is) throw std::runtime_error("no manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  Dataset d;
  d.name = manifest.at("name").get<std::string>();
  d.class_names = manifest.at("classes").get<std::vector<std::string>>();
  d.channels = manifest.at("channels").get<std::size_t>();
  d.generation = manifest.at("generation");
  for (const auto& s : manifest.at("samples")) {
    HyperImage im;
    im.data = load_tensor(dir / s.at("path").get<std::string>());
    im.label = s.at("label").get<int>();
    im.source_id = s.value("source_id", std::string());
    if (im.label < 0 || static_cast<std::size_t>(im.label) >= d.class_names.size()) {
      throw std::runtime_error("manifest label " + std::to_string(im.label) + " out of range");
    }
    if (im.data.rank() != 3 || im.data.dim(0) != d.channels) {
      throw std::runtime_error("sample " + s.at("path").get<std::string>() + " has shape " +
                               shape_str(im.data.shape()) + ", manifest says " +
                               std::to_string(d.channels) + " channels");
    }
    const auto split = s.at("split").get<std::string>();
    if (split == "train") {
      d.train.push_back(std::move(im));
    } else if (split == "test") {
      d.test.push_back(std::move(im));
    } else {
      throw std::runtime_error("unknown split '" + split + "' in manifest");
    }
  }
  return d;
}

Tensor stack_images(const std::vector<HyperImage>& images, std::span<const std::size_t> rows,
                    DType dtype) {
  if (rows.empty()) throw std::invalid_argument("stack_images: no rows");
  const Shape s = images.at(rows[0]).data.shape();
  const std::size_t per = shape_numel(s);
  Tensor out({rows.size(), s[0], s[1], s[2]}, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.mutable_values<T>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& src = images.at(rows[i]).data;
      if (src.shape() != s) throw std::invalid_argument("stack_images: mixed image shapes");
      dispatch(src.dtype(), [&](auto stag) {
        using S = decltype(stag);
        auto sv = src.values<S>();
        for (std::size_t j = 0; j < per; ++j) dst[i * per + j] = static_cast<T>(sv[j]);
      });
    }
  });
  return out;
}

}  // namespace spadapt
