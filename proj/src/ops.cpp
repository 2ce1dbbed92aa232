#include "spadapt/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace spadapt {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw TensorError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got shape " + shape_str(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, out_h, out_w;
  int stride, padding;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_pixels() const { return out_h * out_w; }
  bool direct() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*s - p + i][ox*s - p + j]
template <typename T>
void im2col(const T* x, const ConvGeometry& geo, T* cols) {
  const long H = static_cast<long>(geo.height), W = static_cast<long>(geo.width);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        T* row = cols + ((c * geo.kh + i) * geo.kw + j) * geo.out_pixels();
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long y = static_cast<long>(oy) * geo.stride - geo.padding + static_cast<long>(i);
          T* dst = row + oy * geo.out_w;
          if (y < 0 || y >= H) {
            std::fill(dst, dst + geo.out_w, T(0));
            continue;
          }
          const T* src = x + (c * geo.height + static_cast<std::size_t>(y)) * geo.width;
          if (geo.stride == 1) {
            // valid ox satisfy 0 <= ox - p + j < W
            const long shift = static_cast<long>(j) - geo.padding;
            const long lo = std::clamp(-shift, 0L, static_cast<long>(geo.out_w));
            const long hi = std::clamp(W - shift, lo, static_cast<long>(geo.out_w));
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + geo.out_w, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long xx = static_cast<long>(ox) * geo.stride - geo.padding + static_cast<long>(j);
            dst[ox] = (xx < 0 || xx >= W) ? T(0) : src[xx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& geo, T* dx) {
  const long H = static_cast<long>(geo.height), W = static_cast<long>(geo.width);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        const T* row = cols + ((c * geo.kh + i) * geo.kw + j) * geo.out_pixels();
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long y = static_cast<long>(oy) * geo.stride - geo.padding + static_cast<long>(i);
          if (y < 0 || y >= H) continue;
          T* dst = dx + (c * geo.height + static_cast<std::size_t>(y)) * geo.width;
          const T* src = row + oy * geo.out_w;
          if (geo.stride == 1) {
            const long shift = static_cast<long>(j) - geo.padding;
            const long lo = std::clamp(-shift, 0L, static_cast<long>(geo.out_w));
            const long hi = std::clamp(W - shift, lo, static_cast<long>(geo.out_w));
            for (long ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long xx = static_cast<long>(ox) * geo.stride - geo.padding + static_cast<long>(j);
            if (xx >= 0 && xx < W) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                  const ConvGeometry& geo, Tensor& out) {
  const std::size_t N = input.dim(0), F = weight.dim(0);
  const auto x = input.values<T>();
  const auto w = weight.values<T>();
  const auto b = bias.values<T>();
  auto y = out.mutable_values<T>();
  CMapR<T> wm(w.data(), F, geo.patch());
  std::vector<T> cols(geo.direct() ? 0 : geo.patch() * geo.out_pixels());
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data() + n * in_stride;
    const T* colp = xn;
    if (!geo.direct()) {
      im2col(xn, geo, cols.data());
      colp = cols.data();
    }
    CMapR<T> cm(colp, geo.patch(), geo.out_pixels());
    MapR<T> ym(y.data() + n * F * geo.out_pixels(), F, geo.out_pixels());
    ym.noalias() = wm * cm;
    for (std::size_t f = 0; f < F; ++f) ym.row(f).array() += b[f];
  }
}

template <typename T>
void conv_backward(Tensor input, Tensor weight, Tensor bias, const Tensor& out,
                   const ConvGeometry& geo) {
  const std::size_t N = input.dim(0), F = weight.dim(0);
  const auto gy = out.grad<T>();
  const auto x = input.values<T>();
  const auto w = weight.values<T>();
  CMapR<T> wm(w.data(), F, geo.patch());
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  std::vector<T> cols(geo.direct() ? 0 : geo.patch() * geo.out_pixels());
  std::vector<T> dcols(geo.patch() * geo.out_pixels());

  if (bias.requires_grad()) {
    auto gb = bias.mutable_grad<T>();
    for (std::size_t n = 0; n < N; ++n) {
      CMapR<T> gym(gy.data() + n * F * geo.out_pixels(), F, geo.out_pixels());
      for (std::size_t f = 0; f < F; ++f) gb[f] += gym.row(f).sum();
    }
  }
  const bool need_w = weight.requires_grad();
  const bool need_x = input.requires_grad();
  if (!need_w && !need_x) return;
  MatR<T> gw_acc;
  if (need_w) gw_acc = MatR<T>::Zero(F, geo.patch());
  T* gx = need_x ? input.mutable_grad<T>().data() : nullptr;

  for (std::size_t n = 0; n < N; ++n) {
    CMapR<T> gym(gy.data() + n * F * geo.out_pixels(), F, geo.out_pixels());
    if (need_w) {
      const T* colp = x.data() + n * in_stride;
      if (!geo.direct()) {
        im2col(colp, geo, cols.data());
        colp = cols.data();
      }
      CMapR<T> cm(colp, geo.patch(), geo.out_pixels());
      gw_acc.noalias() += gym * cm.transpose();
    }
    if (need_x) {
      if (geo.direct()) {
        MapR<T> gxm(gx + n * in_stride, geo.patch(), geo.out_pixels());
        gxm.noalias() += wm.transpose() * gym;
      } else {
        MapR<T> dm(dcols.data(), geo.patch(), geo.out_pixels());
        dm.noalias() = wm.transpose() * gym;
        col2im_add(dcols.data(), geo, gx + n * in_stride);
      }
    }
  }
  if (need_w) {
    auto gw = weight.mutable_grad<T>();
    MapR<T>(gw.data(), F, geo.patch()) += gw_acc;
  }
}

}  // namespace

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  check_same_dtype(input, weight, "conv2d");
  check_same_dtype(input, bias, "conv2d");
  if (stride < 1) throw TensorError("conv2d: stride must be >= 1");
  if (padding < 0) throw TensorError("conv2d: padding must be >= 0");
  if (input.dim(1) != weight.dim(1)) {
    throw TensorError("conv2d: input has " + std::to_string(input.dim(1)) +
                      " channels but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) throw TensorError("conv2d: bias length != filter count");

  ConvGeometry geo{};
  geo.channels = input.dim(1);
  geo.height = input.dim(2);
  geo.width = input.dim(3);
  geo.kh = weight.dim(2);
  geo.kw = weight.dim(3);
  geo.stride = stride;
  geo.padding = padding;
  const long ph = static_cast<long>(geo.height) + 2L * padding - static_cast<long>(geo.kh);
  const long pw = static_cast<long>(geo.width) + 2L * padding - static_cast<long>(geo.kw);
  if (ph < 0 || pw < 0) {
    throw TensorError("conv2d: kernel " + shape_str(weight.shape()) +
                      " gives a non-positive output extent for input " + shape_str(input.shape()));
  }
  geo.out_h = static_cast<std::size_t>(ph / stride + 1);
  geo.out_w = static_cast<std::size_t>(pw / stride + 1);

  Tensor out({input.dim(0), weight.dim(0), geo.out_h, geo.out_w}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    conv_forward<decltype(tag)>(input, weight, bias, geo, out);
  });
  check_finite(out, "conv2d");

  if (g.tracks({&input, &weight, &bias})) {
    g.record("conv2d", out, [input, weight, bias, out, geo]() {
      dispatch(input.dtype(), [&](auto tag) {
        conv_backward<decltype(tag)>(input, weight, bias, out, geo);
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

BatchNormState BatchNormState::make(std::size_t channels, DType dtype) {
  BatchNormState s;
  s.running_mean = Tensor({channels}, dtype);
  s.running_var = Tensor({channels}, dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto v = s.running_var.mutable_values<T>();
    std::fill(v.begin(), v.end(), T(1));
  });
  return s;
}

// Sum of per-segment partials in sorted order, so permuting segments cannot
// change a single bit of the result.
namespace {
double ordered_sum(std::vector<double>& parts) {
  std::sort(parts.begin(), parts.end());
  double acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc += parts[i];
  return acc;
}
}  // namespace

Tensor batchnorm2d(Graph& g, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, Mode mode, std::size_t segments) {
  require_rank(input, 4, "batchnorm2d", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (segments == 0 || N % segments != 0) {
    throw TensorError("batchnorm2d: batch of " + std::to_string(N) + " does not split into " +
                      std::to_string(segments) + " segments");
  }
  const std::size_t per = N / segments;
  if (gamma.numel() != C || beta.numel() != C || state.running_mean.numel() != C ||
      state.running_var.numel() != C) {
    throw TensorError("batchnorm2d: per-channel parameters must have length " + std::to_string(C));
  }
  check_same_dtype(input, gamma, "batchnorm2d");
  check_same_dtype(input, beta, "batchnorm2d");
  check_same_dtype(input, state.running_mean, "batchnorm2d");

  Tensor out(input.shape(), input.dtype());
  const std::size_t count = N * HW;
  // Saved for backward: normalized input and 1/sqrt(var+eps) per channel.
  Tensor xhat(input.shape(), input.dtype());
  Tensor inv_std({C}, input.dtype());

  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto x = input.values<T>();
    const auto ga = gamma.values<T>();
    const auto be = beta.values<T>();
    auto y = out.mutable_values<T>();
    auto xh = xhat.mutable_values<T>();
    auto is = inv_std.mutable_values<T>();
    auto rm = state.running_mean.mutable_values<T>();
    auto rv = state.running_var.mutable_values<T>();
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0.0, var = 0.0;
      if (mode == Mode::train) {
        std::vector<double> parts(segments, 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          parts[n / per] += Eigen::Map<const Arr>(x.data() + (n * C + c) * HW, HW)
                                .template cast<double>()
                                .sum();
        }
        mean = ordered_sum(parts) / static_cast<double>(count);
        std::fill(parts.begin(), parts.end(), 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          parts[n / per] +=
              (Eigen::Map<const Arr>(x.data() + (n * C + c) * HW, HW).template cast<double>() -
               mean)
                  .square()
                  .sum();
        }
        var = ordered_sum(parts) / static_cast<double>(count);
        const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
        rm[c] = static_cast<T>((1.0 - state.momentum) * rm[c] + state.momentum * mean);
        rv[c] = static_cast<T>((1.0 - state.momentum) * rv[c] + state.momentum * unbiased);
      } else {
        mean = rm[c];
        var = rv[c];
      }
      const T m = static_cast<T>(mean);
      const T inv = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      is[c] = inv;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = (n * C + c) * HW;
        Eigen::Map<Arr> h(xh.data() + off, HW);
        h = (Eigen::Map<const Arr>(x.data() + off, HW) - m) * inv;
        Eigen::Map<Arr>(y.data() + off, HW) = ga[c] * h + be[c];
      }
    }
  });
  check_finite(out, "batchnorm2d");

  if (g.tracks({&input, &gamma, &beta})) {
    g.record("batchnorm2d", out, [input, gamma, beta, out, xhat, inv_std, mode, N, C, HW, per,
                                  segments]() {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        const auto gy = out.grad<T>();
        const auto xh = xhat.values<T>();
        const auto ga = gamma.values<T>();
        const auto is = inv_std.values<T>();
        const double M = static_cast<double>(N * HW);
        for (std::size_t c = 0; c < C; ++c) {
          std::vector<double> part_gy(segments, 0.0), part_gy_xh(segments, 0.0);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            Eigen::Map<const Arr> gyn(gy.data() + off, HW);
            Eigen::Map<const Arr> xhn(xh.data() + off, HW);
            part_gy[n / per] += gyn.template cast<double>().sum();
            part_gy_xh[n / per] +=
                (gyn.template cast<double>() * xhn.template cast<double>()).sum();
          }
          const double sum_gy = ordered_sum(part_gy);
          const double sum_gy_xh = ordered_sum(part_gy_xh);
          if (gamma.requires_grad()) gamma.mutable_grad<T>()[c] += static_cast<T>(sum_gy_xh);
          if (beta.requires_grad()) beta.mutable_grad<T>()[c] += static_cast<T>(sum_gy);
          if (!input.requires_grad()) continue;
          auto gx = input.mutable_grad<T>();
          const T k = static_cast<T>(static_cast<double>(ga[c]) * is[c]);
          const T mean_gy = static_cast<T>(sum_gy / M);
          const T mean_gy_xh = static_cast<T>(sum_gy_xh / M);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            Eigen::Map<const Arr> gyn(gy.data() + off, HW);
            Eigen::Map<Arr> gxn(gx.data() + off, HW);
            if (mode == Mode::train) {
              gxn += k * (gyn - mean_gy - Eigen::Map<const Arr>(xh.data() + off, HW) * mean_gy_xh);
            } else {
              gxn += k * gyn;
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor relu(Graph& g, const Tensor& input) {
  Tensor out(input.shape(), input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = input.values<T>();
    auto y = out.mutable_values<T>();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(x[i], T(0));
  });
  check_finite(out, "relu");
  if (g.tracks({&input})) {
    g.record("relu", out, [input, out]() mutable {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto x = input.values<T>();
        const auto gy = out.grad<T>();
        auto gx = input.mutable_grad<T>();
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
      });
    });
  }
  return out;
}

Tensor maxpool2d(Graph& g, const Tensor& input, int kernel, int stride) {
  require_rank(input, 4, "maxpool2d", "input");
  if (kernel < 1 || stride < 1) throw TensorError("maxpool2d: kernel and stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  if (k > H || k > W) {
    throw TensorError("maxpool2d: window " + std::to_string(k) + " exceeds spatial extent " +
                      shape_str(input.shape()));
  }
  const std::size_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  Tensor out({N, C, Ho, Wo}, input.dtype());
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = input.values<T>();
    auto y = out.mutable_values<T>();
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const std::size_t base = nc * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
          std::size_t best = base + oy * s * W + ox * s;
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t idx = base + (oy * s + i) * W + ox * s + j;
              if (x[idx] > x[best]) best = idx;
            }
          }
          y[o] = x[best];
          (*argmax)[o] = best;
        }
      }
    }
  });
  check_finite(out, "maxpool2d");
  if (g.tracks({&input})) {
    g.record("maxpool2d", out, [input, out, argmax]() mutable {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        auto gx = input.mutable_grad<T>();
        for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
      });
    });
  }
  return out;
}

Tensor dense(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  check_same_dtype(input, weight, "dense");
  check_same_dtype(input, bias, "dense");
  const std::size_t N = input.dim(0), D = input.dim(1), K = weight.dim(0);
  if (weight.dim(1) != D) {
    throw TensorError("dense: input width " + std::to_string(D) + " != weight width " +
                      std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != K) throw TensorError("dense: bias length != output width");
  Tensor out({N, K}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    CMapR<T> x(input.values<T>().data(), N, D);
    CMapR<T> w(weight.values<T>().data(), K, D);
    const auto b = bias.values<T>();
    MapR<T> y(out.mutable_values<T>().data(), N, K);
    y.noalias() = x * w.transpose();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) y(n, k) += b[k];
    }
  });
  check_finite(out, "dense");
  if (g.tracks({&input, &weight, &bias})) {
    g.record("dense", out, [input, weight, bias, out, N, D, K]() mutable {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        CMapR<T> gy(out.grad<T>().data(), N, K);
        if (input.requires_grad()) {
          CMapR<T> w(weight.values<T>().data(), K, D);
          MapR<T>(input.mutable_grad<T>().data(), N, D).noalias() += gy * w;
        }
        if (weight.requires_grad()) {
          CMapR<T> x(input.values<T>().data(), N, D);
          MapR<T>(weight.mutable_grad<T>().data(), K, D).noalias() += gy.transpose() * x;
        }
        if (bias.requires_grad()) {
          auto gb = bias.mutable_grad<T>();
          for (std::size_t k = 0; k < K; ++k) gb[k] += gy.col(k).sum();
        }
      });
    });
  }
  return out;
}

Tensor global_avg_pool(Graph& g, const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tensor out({N, C}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = input.values<T>();
    auto y = out.mutable_values<T>();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += x[nc * HW + i];
      y[nc] = acc / static_cast<T>(HW);
    }
  });
  check_finite(out, "global_avg_pool");
  if (g.tracks({&input})) {
    g.record("global_avg_pool", out, [input, out, N, C, HW]() mutable {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        auto gx = input.mutable_grad<T>();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const T v = gy[nc] / static_cast<T>(HW);
          for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += v;
        }
      });
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw TensorError("softmax_cross_entropy: label count != batch size");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw TensorError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                        std::to_string(K) + ")");
    }
  }
  Tensor out({}, logits.dtype());
  Tensor probs({N, K}, logits.dtype());
  std::vector<int> lab(labels.begin(), labels.end());
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto z = logits.values<T>();
    auto p = probs.mutable_values<T>();
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* row = z.data() + n * K;
      const T mx = *std::max_element(row, row + K);
      double denom = 0.0;
      for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
      for (std::size_t k = 0; k < K; ++k) {
        p[n * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / denom);
      }
      total += std::log(denom) - static_cast<double>(row[lab[n]] - mx);
    }
    out.mutable_values<T>()[0] = static_cast<T>(total / static_cast<double>(N));
  });
  check_finite(out, "softmax_cross_entropy");
  if (g.tracks({&logits})) {
    g.record("softmax_cross_entropy", out, [logits, out, probs, lab, N, K]() mutable {
      dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T gy = out.grad<T>()[0] / static_cast<T>(N);
        const auto p = probs.values<T>();
        auto gx = logits.mutable_grad<T>();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const T onehot = static_cast<int>(k) == lab[n] ? T(1) : T(0);
            gx[n * K + k] += gy * (p[n * K + k] - onehot);
          }
        }
      });
    });
  }
  return out;
}

Tensor mse(Graph& g, const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw TensorError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                      shape_str(target.shape()));
  }
  check_same_dtype(pred, target, "mse");
  Tensor out({}, pred.dtype());
  const std::size_t n = pred.numel();
  dispatch(pred.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto p = pred.values<T>();
    const auto t = target.values<T>();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(p[i]) - t[i];
      acc += d * d;
    }
    out.mutable_values<T>()[0] = static_cast<T>(acc / static_cast<double>(n));
  });
  check_finite(out, "mse");
  if (g.tracks({&pred, &target})) {
    g.record("mse", out, [pred, target, out, n]() mutable {
      dispatch(pred.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T k = T(2) * out.grad<T>()[0] / static_cast<T>(n);
        const auto p = pred.values<T>();
        const auto t = target.values<T>();
        if (pred.requires_grad()) {
          auto gp = pred.mutable_grad<T>();
          for (std::size_t i = 0; i < n; ++i) gp[i] += k * (p[i] - t[i]);
        }
        if (target.requires_grad()) {
          auto gt = target.mutable_grad<T>();
          for (std::size_t i = 0; i < n; ++i) gt[i] -= k * (p[i] - t[i]);
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  check_same_dtype(a, b, "add");
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = a.values<T>();
    const auto y = b.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  });
  check_finite(out, "add");
  if (g.tracks({&a, &b})) {
    g.record("add", out, [a, b, out]() mutable {
      dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        for (const Tensor* t : {&a, &b}) {
          if (!t->requires_grad()) continue;
          auto gx = t->mutable_grad<T>();
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
      });
    });
  }
  return out;
}

Tensor scale(Graph& g, const Tensor& a, double factor) {
  Tensor out(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = a.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(factor) * x[i];
  });
  check_finite(out, "scale");
  if (g.tracks({&a})) {
    g.record("scale", out, [a, out, factor]() mutable {
      dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        auto gx = a.mutable_grad<T>();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += static_cast<T>(factor) * gy[i];
      });
    });
  }
  return out;
}

Tensor sum(Graph& g, const Tensor& a) {
  Tensor out({}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double acc = 0.0;
    for (T v : a.values<T>()) acc += v;
    out.mutable_values<T>()[0] = static_cast<T>(acc);
  });
  check_finite(out, "sum");
  if (g.tracks({&a})) {
    g.record("sum", out, [a, out]() mutable {
      dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T gy = out.grad<T>()[0];
        for (auto& v : a.mutable_grad<T>()) v += gy;
      });
    });
  }
  return out;
}

Tensor weighted_sum(Graph& g, const Tensor& a, const Tensor& weights) {
  if (a.shape() != weights.shape()) throw TensorError("weighted_sum: shape mismatch");
  check_same_dtype(a, weights, "weighted_sum");
  Tensor out({}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = a.values<T>();
    const auto w = weights.values<T>();
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * w[i];
    out.mutable_values<T>()[0] = static_cast<T>(acc);
  });
  check_finite(out, "weighted_sum");
  if (g.tracks({&a})) {
    g.record("weighted_sum", out, [a, weights, out]() mutable {
      dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T gy = out.grad<T>()[0];
        const auto w = weights.values<T>();
        auto gx = a.mutable_grad<T>();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy * w[i];
      });
    });
  }
  return out;
}

Tensor concat_channels(Graph& g, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_channels: no inputs");
  const auto& s0 = parts.front().shape();
  if (s0.size() != 4) throw TensorError("concat_channels: inputs must be NCHW");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw TensorError("concat_channels: incompatible shape " + shape_str(s));
    }
    check_same_dtype(p, parts.front(), "concat_channels");
    total += s[1];
  }
  const std::size_t N = s0[0], HW = s0[2] * s0[3];
  Tensor out({N, total, s0[2], s0[3]}, parts.front().dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_values<T>();
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t c0 = 0;
      for (const auto& p : parts) {
        const std::size_t C = p.dim(1);
        const auto x = p.values<T>();
        std::copy_n(x.data() + n * C * HW, C * HW, o.data() + (n * total + c0) * HW);
        c0 += C;
      }
    }
  });
  if (g.tracks(parts)) {
    g.record("concat_channels", out, [parts, out, N, total, HW]() mutable {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        std::size_t c0 = 0;
        for (auto& p : parts) {
          const std::size_t C = p.dim(1);
          if (p.requires_grad()) {
            auto gx = p.mutable_grad<T>();
            for (std::size_t n = 0; n < N; ++n) {
              const T* src = gy.data() + (n * total + c0) * HW;
              T* dst = gx.data() + n * C * HW;
              for (std::size_t i = 0; i < C * HW; ++i) dst[i] += src[i];
            }
          }
          c0 += C;
        }
      });
    });
  }
  return out;
}

Tensor concat_batch(Graph& g, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_batch: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw TensorError("concat_batch: inputs need a batch axis");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw TensorError("concat_batch: incompatible shape " + shape_str(s));
    }
    check_same_dtype(p, parts.front(), "concat_batch");
    total += s[0];
  }
  shape[0] = total;
  Tensor out(shape, parts.front().dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_values<T>();
    std::size_t at = 0;
    for (const auto& p : parts) {
      const auto x = p.values<T>();
      std::copy(x.begin(), x.end(), o.begin() + at);
      at += x.size();
    }
  });
  if (g.tracks(parts)) {
    g.record("concat_batch", out, [parts, out]() mutable {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        std::size_t at = 0;
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto gx = p.mutable_grad<T>();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[at + i];
          }
          at += p.numel();
        }
      });
    });
  }
  return out;
}

std::vector<Tensor> split_batch(Graph& g, const Tensor& input, std::size_t parts) {
  if (input.rank() == 0 || parts == 0 || input.dim(0) % parts != 0) {
    throw TensorError("split_batch: cannot split " + shape_str(input.shape()) + " into " +
                      std::to_string(parts) + " equal parts");
  }
  Shape shape = input.shape();
  shape[0] /= parts;
  const std::size_t len = shape_numel(shape);
  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t i = 0; i < parts; ++i) {
    Tensor piece(shape, input.dtype());
    dispatch(input.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const auto x = input.values<T>();
      auto y = piece.mutable_values<T>();
      std::copy_n(x.begin() + i * len, len, y.begin());
    });
    if (g.tracks({&input})) {
      g.record("split_batch", piece, [input, piece, i, len]() {
        dispatch(input.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const auto gy = piece.grad<T>();
          auto gx = input.mutable_grad<T>();
          for (std::size_t j = 0; j < len; ++j) gx[i * len + j] += gy[j];
        });
      });
    }
    out.push_back(std::move(piece));
  }
  return out;
}

Tensor gather_channels(Graph& g, const Tensor& input, std::span<const std::size_t> channels) {
  require_rank(input, 4, "gather_channels", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  for (auto c : channels) {
    if (c >= C) {
      throw TensorError("gather_channels: channel " + std::to_string(c) + " out of range for " +
                        std::to_string(C) + " channels");
    }
  }
  const std::vector<std::size_t> idx(channels.begin(), channels.end());
  const std::size_t K = idx.size();
  Tensor out({N, K, input.dim(2), input.dim(3)}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto x = input.values<T>();
    auto o = out.mutable_values<T>();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        std::copy_n(x.data() + (n * C + idx[k]) * HW, HW, o.data() + (n * K + k) * HW);
      }
    }
  });
  if (g.tracks({&input})) {
    g.record("gather_channels", out, [input, out, idx, N, C, K, HW]() mutable {
      dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        auto gx = input.mutable_grad<T>();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const T* src = gy.data() + (n * K + k) * HW;
            T* dst = gx.data() + (n * C + idx[k]) * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] += src[i];
          }
        }
      });
    });
  }
  return out;
}

namespace {

void check_parts(const std::vector<Tensor>& parts, const char* op) {
  if (parts.empty()) throw TensorError(std::string(op) + ": no inputs");
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape()) {
      throw TensorError(std::string(op) + ": shape mismatch " + shape_str(p.shape()) + " vs " +
                        shape_str(parts.front().shape()));
    }
    check_same_dtype(p, parts.front(), op);
  }
}

}  // namespace

Tensor elementwise_max(Graph& g, const std::vector<Tensor>& parts) {
  check_parts(parts, "elementwise_max");
  Tensor out(parts.front().shape(), parts.front().dtype());
  auto winner = std::make_shared<std::vector<std::uint32_t>>(out.numel(), 0);
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_values<T>();
    const auto first = parts.front().values<T>();
    std::copy(first.begin(), first.end(), o.begin());
    for (std::size_t v = 1; v < parts.size(); ++v) {
      const auto x = parts[v].values<T>();
      for (std::size_t i = 0; i < o.size(); ++i) {
        if (x[i] > o[i]) {
          o[i] = x[i];
          (*winner)[i] = static_cast<std::uint32_t>(v);
        }
      }
    }
  });
  if (g.tracks(parts)) {
    g.record("elementwise_max", out, [parts, out, winner]() mutable {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        for (std::size_t v = 0; v < parts.size(); ++v) {
          if (!parts[v].requires_grad()) continue;
          auto gx = parts[v].mutable_grad<T>();
          for (std::size_t i = 0; i < gy.size(); ++i) {
            if ((*winner)[i] == v) gx[i] += gy[i];
          }
        }
      });
    });
  }
  return out;
}

Tensor elementwise_mean(Graph& g, const std::vector<Tensor>& parts) {
  check_parts(parts, "elementwise_mean");
  Tensor out(parts.front().shape(), parts.front().dtype());
  const double inv = 1.0 / static_cast<double>(parts.size());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.mutable_values<T>();
    for (const auto& p : parts) {
      const auto x = p.values<T>();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += x[i];
    }
    for (auto& v : o) v = static_cast<T>(v * inv);
  });
  if (g.tracks(parts)) {
    g.record("elementwise_mean", out, [parts, out, inv]() mutable {
      dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto gy = out.grad<T>();
        for (auto& p : parts) {
          if (!p.requires_grad()) continue;
          auto gx = p.mutable_grad<T>();
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += static_cast<T>(gy[i] * inv);
        }
      });
    });
  }
  return out;
}

}  // namespace spadapt
