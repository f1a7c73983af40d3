#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonguard/tensor/graph.hpp"
#include "poisonguard/tensor/tensor.hpp"

namespace poisonguard {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Gradient buffer of `v`, allocated on demand; null when `v` takes no grad.
template <typename T>
T* grad_of(const Var<T>& v) {
  if (!v->requires_grad) return nullptr;
  v->ensure_grad();
  return v->grad.data();
}

template <typename T>
Var<T> output_like(Shape shape) {
  return std::make_shared<Tensor<T>>(Tensor<T>(std::move(shape)));
}

}  // namespace detail

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel,
                                 std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via im2col + GEMM.

template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& kernel,
              const Var<T>& bias, std::size_t stride, std::size_t pad) {
  expect_rank(x->shape, 4, "conv2d input");
  expect_rank(kernel->shape, 4, "conv2d kernel");
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const std::size_t F = kernel->dim(0), KH = kernel->dim(2), KW = kernel->dim(3);
  if (kernel->dim(1) != C) {
    throw ShapeError("conv2d: input has " + std::to_string(C) +
                     " channels but kernel expects " + std::to_string(kernel->dim(1)) +
                     " (input " + shape_str(x->shape) + ", kernel " +
                     shape_str(kernel->shape) + ")");
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (KH > H + 2 * pad || KW > W + 2 * pad) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel->shape) +
                     " larger than padded input " + shape_str(x->shape) +
                     " with pad " + std::to_string(pad));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != F)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape) + " does not match " +
                     std::to_string(F) + " filters");
  }
  const std::size_t HO = conv_out_size(H, KH, stride, pad);
  const std::size_t WO = conv_out_size(W, KW, stride, pad);
  const std::size_t rows = C * KH * KW;
  const std::size_t spatial = HO * WO;
  const std::size_t cols_n = N * spatial;

  auto out = detail::output_like<T>({N, F, HO, WO});
  auto cols = std::make_shared<Buffer<T>>();

  // Valid output-column range [lo, hi) for kernel column offset j.
  auto col_range = [=](std::size_t j) {
    const std::size_t lo = pad > j ? (pad - j + stride - 1) / stride : 0;
    const std::size_t hi = (W + pad > j) ? std::min(WO, (W + pad - j - 1) / stride + 1) : 0;
    return std::pair{lo, std::max(lo, hi)};
  };
  auto row_valid = [=](std::size_t oh, std::size_t i, std::size_t& ih) {
    const std::size_t pos = oh * stride + i;
    if (pos < pad || pos - pad >= H) return false;
    ih = pos - pad;
    return true;
  };

  auto forward = [=] {
    if (pad > 0) {
      cols->assign(rows * cols_n, T{0});
    } else {
      cols->resize(rows * cols_n);
    }
    const T* xd = x->data.data();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < KH; ++i) {
        for (std::size_t j = 0; j < KW; ++j) {
          T* row = cols->data() + ((c * KH + i) * KW + j) * cols_n;
          const auto [lo, hi] = col_range(j);
          for (std::size_t n = 0; n < N; ++n) {
            const T* plane = xd + (n * C + c) * H * W;
            T* dst = row + n * spatial;
            for (std::size_t oh = 0; oh < HO; ++oh) {
              std::size_t ih;
              if (!row_valid(oh, i, ih)) continue;
              if (lo == hi) continue;
              const T* src = plane + ih * W + lo * stride + j - pad;
              T* out_row = dst + oh * WO + lo;
              if (stride == 1) {
                std::copy(src, src + (hi - lo), out_row);
              } else {
                for (std::size_t k = 0; k < hi - lo; ++k) out_row[k] = src[k * stride];
              }
            }
          }
        }
      }
    }
    detail::ConstMatMap<T> K(kernel->data.data(), F, rows);
    detail::ConstMatMap<T> X(cols->data(), rows, cols_n);
    detail::RowMat<T> Y = K * X;
    T* od = out->data.data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        const T b = bias ? bias->data[f] : T{0};
        const T* src = Y.data() + f * cols_n + n * spatial;
        T* dst = od + (n * F + f) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) dst[s] = src[s] + b;
      }
    }
  };

  auto backward = [=] {
    detail::RowMat<T> dY(F, cols_n);
    const T* og = out->grad.data();
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t f = 0; f < F; ++f) {
        const T* src = og + (n * F + f) * spatial;
        T* dst = dY.data() + f * cols_n + n * spatial;
        std::copy(src, src + spatial, dst);
      }
    }
    detail::ConstMatMap<T> X(cols->data(), rows, cols_n);
    if (T* kg = detail::grad_of(kernel)) {
      detail::MatMap<T> dK(kg, F, rows);
      dK.noalias() += dY * X.transpose();
    }
    if (bias) {
      if (T* bg = detail::grad_of(bias)) {
        for (std::size_t f = 0; f < F; ++f) bg[f] += dY.row(f).sum();
      }
    }
    if (T* xg = detail::grad_of(x)) {
      detail::ConstMatMap<T> K(kernel->data.data(), F, rows);
      detail::RowMat<T> dX = K.transpose() * dY;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < KH; ++i) {
          for (std::size_t j = 0; j < KW; ++j) {
            const T* row = dX.data() + ((c * KH + i) * KW + j) * cols_n;
            const auto [lo, hi] = col_range(j);
            for (std::size_t n = 0; n < N; ++n) {
              T* plane = xg + (n * C + c) * H * W;
              const T* src = row + n * spatial;
              for (std::size_t oh = 0; oh < HO; ++oh) {
                std::size_t ih;
                if (!row_valid(oh, i, ih)) continue;
                if (lo == hi) continue;
                T* dst = plane + ih * W + lo * stride + j - pad;
                const T* in_row = src + oh * WO + lo;
                for (std::size_t k = 0; k < hi - lo; ++k) dst[k * stride] += in_row[k];
              }
            }
          }
        }
      }
    }
  };

  std::vector<Var<T>> inputs{x, kernel};
  if (bias) inputs.push_back(bias);
  return g.record("conv2d", std::move(inputs), out, forward, backward);
}

template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& kernel,
              std::size_t stride, std::size_t pad) {
  return conv2d(g, x, kernel, Var<T>{}, stride, pad);
}

// ---------------------------------------------------------------------------
// Fully connected: out = x * weight + bias (bias broadcast over rows).

template <typename T>
Var<T> dense(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  expect_rank(x->shape, 2, "dense input");
  expect_rank(weight->shape, 2, "dense weight");
  const std::size_t N = x->dim(0), D = x->dim(1), M = weight->dim(1);
  if (weight->dim(0) != D) {
    throw ShapeError("dense: input " + shape_str(x->shape) + " incompatible with weight " +
                     shape_str(weight->shape));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != M)) {
    throw ShapeError("dense: bias " + shape_str(bias->shape) + " does not match " +
                     std::to_string(M) + " outputs");
  }
  auto out = detail::output_like<T>({N, M});
  auto forward = [=] {
    detail::ConstMatMap<T> X(x->data.data(), N, D);
    detail::ConstMatMap<T> Wt(weight->data.data(), D, M);
    detail::MatMap<T> Y(out->data.data(), N, M);
    Y.noalias() = X * Wt;
    if (bias) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias->data.data(), M);
      Y.rowwise() += b;
    }
  };
  auto backward = [=] {
    detail::ConstMatMap<T> dY(out->grad.data(), N, M);
    if (T* xg = detail::grad_of(x)) {
      detail::ConstMatMap<T> Wt(weight->data.data(), D, M);
      detail::MatMap<T> dX(xg, N, D);
      dX.noalias() += dY * Wt.transpose();
    }
    if (T* wg = detail::grad_of(weight)) {
      detail::ConstMatMap<T> X(x->data.data(), N, D);
      detail::MatMap<T> dW(wg, D, M);
      dW.noalias() += X.transpose() * dY;
    }
    if (bias) {
      if (T* bg = detail::grad_of(bias)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bg, M);
        db += dY.colwise().sum();
      }
    }
  };
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return g.record("dense", std::move(inputs), out, forward, backward);
}

// ---------------------------------------------------------------------------
// Elementwise.

template <typename T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  auto out = detail::output_like<T>(x->shape);
  auto forward = [=] {
    for (std::size_t i = 0; i < x->numel(); ++i) {
      out->data[i] = x->data[i] > T{0} ? x->data[i] : T{0};
    }
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t i = 0; i < x->numel(); ++i) {
        xg[i] += x->data[i] > T{0} ? out->grad[i] : T{0};
      }
    }
  };
  return g.record("relu", {x}, out, forward, backward);
}

template <typename T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  expect_same_shape(a->shape, b->shape, "add");
  auto out = detail::output_like<T>(a->shape);
  auto forward = [=] {
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  };
  auto backward = [=] {
    for (const auto& v : {a, b}) {
      if (T* vg = detail::grad_of(v)) {
        for (std::size_t i = 0; i < v->numel(); ++i) vg[i] += out->grad[i];
      }
    }
  };
  return g.record("add", {a, b}, out, forward, backward);
}

template <typename T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  expect_same_shape(a->shape, b->shape, "mul");
  auto out = detail::output_like<T>(a->shape);
  auto forward = [=] {
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  };
  auto backward = [=] {
    if (T* ag = detail::grad_of(a)) {
      for (std::size_t i = 0; i < a->numel(); ++i) ag[i] += out->grad[i] * b->data[i];
    }
    if (T* bg = detail::grad_of(b)) {
      for (std::size_t i = 0; i < b->numel(); ++i) bg[i] += out->grad[i] * a->data[i];
    }
  };
  return g.record("mul", {a, b}, out, forward, backward);
}

template <typename T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor) {
  auto out = detail::output_like<T>(x->shape);
  auto forward = [=] {
    for (std::size_t i = 0; i < x->numel(); ++i) out->data[i] = factor * x->data[i];
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t i = 0; i < x->numel(); ++i) xg[i] += factor * out->grad[i];
    }
  };
  return g.record("scale", {x}, out, forward, backward);
}

template <typename T>
Var<T> sum(Graph<T>& g, const Var<T>& x) {
  auto out = detail::output_like<T>(Shape{});
  auto forward = [=] {
    std::common_type_t<T, double> s = 0;
    for (T v : x->data) s += v;
    out->data[0] = static_cast<T>(s);
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t i = 0; i < x->numel(); ++i) xg[i] += out->grad[0];
    }
  };
  return g.record("sum", {x}, out, forward, backward);
}

/// ln(1 + e^x), evaluated without overflow.
template <typename T>
T softplus_value(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

/// Inverse of softplus: ln(e^s - 1) for s > 0.
template <typename T>
T inverse_softplus(T s) {
  if (!(s > T{0})) throw std::domain_error("inverse_softplus needs a positive argument");
  return s > T{20} ? s + std::log1p(-std::exp(-s)) : std::log(std::expm1(s));
}

template <typename T>
Var<T> softplus(Graph<T>& g, const Var<T>& x) {
  auto out = detail::output_like<T>(x->shape);
  auto forward = [=] {
    for (std::size_t i = 0; i < x->numel(); ++i) out->data[i] = softplus_value(x->data[i]);
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t i = 0; i < x->numel(); ++i) {
        xg[i] += out->grad[i] * sigmoid_value(x->data[i]);
      }
    }
  };
  return g.record("softplus", {x}, out, forward, backward);
}

/// Multiplies each (sample, channel) slice of `x` by `signs[n, c]`. `x` may be
/// [N, C] or [N, C, H, W]; `signs` is a constant [N, C] tensor.
template <typename T>
Var<T> channel_sign(Graph<T>& g, const Var<T>& x, std::shared_ptr<const Tensor<T>> signs) {
  if (x->rank() < 2) throw ShapeError("channel_sign: input must have rank >= 2");
  const std::size_t N = x->dim(0), C = x->dim(1);
  if (signs->shape != Shape{N, C}) {
    throw ShapeError("channel_sign: signs " + shape_str(signs->shape) +
                     " do not match input " + shape_str(x->shape));
  }
  const std::size_t inner = x->numel() / (N * C);
  auto out = detail::output_like<T>(x->shape);
  auto forward = [=] {
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      const T s = signs->data[nc];
      for (std::size_t k = 0; k < inner; ++k) {
        out->data[nc * inner + k] = s * x->data[nc * inner + k];
      }
    }
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T s = signs->data[nc];
        for (std::size_t k = 0; k < inner; ++k) xg[nc * inner + k] += s * out->grad[nc * inner + k];
      }
    }
  };
  return g.record("channel_sign", {x}, out, forward, backward);
}

// ---------------------------------------------------------------------------
// Shape and pooling.

template <typename T>
Var<T> flatten(Graph<T>& g, const Var<T>& x) {
  const std::size_t N = x->dim(0);
  auto out = detail::output_like<T>({N, x->numel() / N});
  auto forward = [=] { out->data = x->data; };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t i = 0; i < x->numel(); ++i) xg[i] += out->grad[i];
    }
  };
  return g.record("flatten", {x}, out, forward, backward);
}

/// Non-overlapping max pooling with window == stride == `size`.
template <typename T>
Var<T> maxpool2d(Graph<T>& g, const Var<T>& x, std::size_t size) {
  expect_rank(x->shape, 4, "maxpool2d input");
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (size < 1 || size > H || size > W) throw ShapeError("maxpool2d: bad window size");
  const std::size_t HO = H / size, WO = W / size;
  auto out = detail::output_like<T>({N, C, HO, WO});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out->numel());
  auto forward = [=] {
    for (std::size_t p = 0; p < N * C; ++p) {
      const T* plane = x->data.data() + p * H * W;
      for (std::size_t oh = 0; oh < HO; ++oh) {
        for (std::size_t ow = 0; ow < WO; ++ow) {
          std::size_t best = (oh * size) * W + ow * size;
          for (std::size_t i = 0; i < size; ++i) {
            for (std::size_t j = 0; j < size; ++j) {
              const std::size_t idx = (oh * size + i) * W + ow * size + j;
              if (plane[idx] > plane[best]) best = idx;
            }
          }
          const std::size_t o = (p * HO + oh) * WO + ow;
          out->data[o] = plane[best];
          (*argmax)[o] = p * H * W + best;
        }
      }
    }
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t o = 0; o < out->numel(); ++o) xg[(*argmax)[o]] += out->grad[o];
    }
  };
  return g.record("maxpool2d", {x}, out, forward, backward);
}

template <typename T>
Var<T> global_avgpool(Graph<T>& g, const Var<T>& x) {
  expect_rank(x->shape, 4, "global_avgpool input");
  const std::size_t N = x->dim(0), C = x->dim(1), S = x->dim(2) * x->dim(3);
  auto out = detail::output_like<T>({N, C});
  auto forward = [=] {
    for (std::size_t p = 0; p < N * C; ++p) {
      T s{0};
      for (std::size_t k = 0; k < S; ++k) s += x->data[p * S + k];
      out->data[p] = s / static_cast<T>(S);
    }
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t p = 0; p < N * C; ++p) {
        const T d = out->grad[p] / static_cast<T>(S);
        for (std::size_t k = 0; k < S; ++k) xg[p * S + k] += d;
      }
    }
  };
  return g.record("global_avgpool", {x}, out, forward, backward);
}

/// Parameter-free residual shortcut: spatial subsampling by `stride` and
/// zero-padding of the channel axis to `out_channels` (split evenly on both
/// sides).
template <typename T>
Var<T> pad_shortcut(Graph<T>& g, const Var<T>& x, std::size_t out_channels,
                    std::size_t stride) {
  expect_rank(x->shape, 4, "pad_shortcut input");
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (out_channels < C) throw ShapeError("pad_shortcut: cannot shrink channels");
  const std::size_t HO = (H - 1) / stride + 1, WO = (W - 1) / stride + 1;
  const std::size_t offset = (out_channels - C) / 2;
  auto out = detail::output_like<T>({N, out_channels, HO, WO});
  auto forward = [=] {
    std::fill(out->data.begin(), out->data.end(), T{0});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HO; ++i)
          for (std::size_t j = 0; j < WO; ++j)
            out->data[((n * out_channels + c + offset) * HO + i) * WO + j] =
                x->data[((n * C + c) * H + i * stride) * W + j * stride];
  };
  auto backward = [=] {
    if (T* xg = detail::grad_of(x)) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < HO; ++i)
            for (std::size_t j = 0; j < WO; ++j)
              xg[((n * C + c) * H + i * stride) * W + j * stride] +=
                  out->grad[((n * out_channels + c + offset) * HO + i) * WO + j];
    }
  };
  return g.record("pad_shortcut", {x}, out, forward, backward);
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel. Running statistics live
// outside the graph and are updated in training mode.

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

template <typename T>
Var<T> batchnorm2d(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   Tensor<T>& running_mean, Tensor<T>& running_var,
                   BatchNormOptions opt) {
  expect_rank(x->shape, 4, "batchnorm2d input");
  const std::size_t N = x->dim(0), C = x->dim(1), S = x->dim(2) * x->dim(3);
  if (gamma->shape != Shape{C} || beta->shape != Shape{C} ||
      running_mean.shape != Shape{C} || running_var.shape != Shape{C}) {
    throw ShapeError("batchnorm2d: parameter shapes do not match " +
                     std::to_string(C) + " channels");
  }
  const std::size_t M = N * S;
  if (opt.training && M < 2) throw ShapeError("batchnorm2d: training needs > 1 value per channel");
  auto out = detail::output_like<T>(x->shape);
  auto xhat = std::make_shared<std::vector<T>>(x->numel());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  Tensor<T>* rm = &running_mean;
  Tensor<T>* rv = &running_var;
  using Acc = std::common_type_t<T, double>;

  auto forward = [=] {
    for (std::size_t c = 0; c < C; ++c) {
      Acc mean, var;
      if (opt.training) {
        Acc s = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < S; ++k) s += x->data[(n * C + c) * S + k];
        mean = s / static_cast<Acc>(M);
        Acc ss = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < S; ++k) {
            const Acc d = x->data[(n * C + c) * S + k] - mean;
            ss += d * d;
          }
        var = ss / static_cast<Acc>(M);
        rm->data[c] = static_cast<T>((1 - opt.momentum) * rm->data[c] + opt.momentum * mean);
        rv->data[c] = static_cast<T>((1.0 - opt.momentum) * rv->data[c] +
                                     opt.momentum * var * M / (M - Acc{1}));
      } else {
        mean = rm->data[c];
        var = rv->data[c];
      }
      const T is = static_cast<T>(1 / std::sqrt(var + static_cast<Acc>(opt.eps)));
      (*inv_std)[c] = is;
      const T m = static_cast<T>(mean);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < S; ++k) {
          const std::size_t i = (n * C + c) * S + k;
          (*xhat)[i] = (x->data[i] - m) * is;
          out->data[i] = gamma->data[c] * (*xhat)[i] + beta->data[c];
        }
    }
  };

  auto backward = [=] {
    T* xg = detail::grad_of(x);
    T* gg = detail::grad_of(gamma);
    T* bg = detail::grad_of(beta);
    for (std::size_t c = 0; c < C; ++c) {
      Acc sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < S; ++k) {
          const std::size_t i = (n * C + c) * S + k;
          sum_dy += out->grad[i];
          sum_dy_xhat += out->grad[i] * (*xhat)[i];
        }
      if (gg) gg[c] += static_cast<T>(sum_dy_xhat);
      if (bg) bg[c] += static_cast<T>(sum_dy);
      if (!xg) continue;
      const T scale_c = gamma->data[c] * (*inv_std)[c];
      if (opt.training) {
        const T mean_dy = static_cast<T>(sum_dy / static_cast<Acc>(M));
        const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<Acc>(M));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < S; ++k) {
            const std::size_t i = (n * C + c) * S + k;
            xg[i] += scale_c * (out->grad[i] - mean_dy - (*xhat)[i] * mean_dy_xhat);
          }
      } else {
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < S; ++k) {
            const std::size_t i = (n * C + c) * S + k;
            xg[i] += scale_c * out->grad[i];
          }
      }
    }
  };
  return g.record("batchnorm2d", {x, gamma, beta}, out, forward, backward);
}

// ---------------------------------------------------------------------------
// Losses.

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

template <typename T>
struct SoftmaxCrossEntropy {
  Var<T> loss;                           // scalar, mean over rows
  std::shared_ptr<Tensor<T>> probs;      // [N, K]
};

/// Row-wise softmax with max subtraction.
template <typename T>
void softmax_rows(std::span<const T> logits, std::size_t K, std::span<T> probs) {
  const std::size_t N = logits.size() / K;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data() + n * K;
    T mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    for (std::size_t k = 0; k < K; ++k) {
      probs[n * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / z);
    }
  }
}

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(Graph<T>& g, const Var<T>& logits,
                                             std::span<const int> labels) {
  expect_rank(logits->shape, 2, "softmax_cross_entropy logits");
  const std::size_t N = logits->dim(0), K = logits->dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(N) + " rows");
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw LabelError("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                       " at row " + std::to_string(n) + " outside [0," +
                       std::to_string(K) + ")");
    }
  }
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  auto probs = std::make_shared<Tensor<T>>(Tensor<T>({N, K}));
  auto out = detail::output_like<T>(Shape{});
  auto forward = [=] {
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* row = logits->data.data() + n * K;
      T mx = row[0];
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
      const double log_z = std::log(z);
      for (std::size_t k = 0; k < K; ++k) {
        probs->data[n * K + k] =
            static_cast<T>(std::exp(static_cast<double>(row[k] - mx) - log_z));
      }
      total += log_z - static_cast<double>(row[(*lab)[n]] - mx);
    }
    out->data[0] = static_cast<T>(total / static_cast<double>(N));
  };
  auto backward = [=] {
    if (T* lg = detail::grad_of(logits)) {
      const T d = out->grad[0] / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const T onehot = static_cast<std::size_t>((*lab)[n]) == k ? T{1} : T{0};
          lg[n * K + k] += d * (probs->data[n * K + k] - onehot);
        }
      }
    }
  };
  auto loss = g.record("softmax_cross_entropy", {logits}, out, forward, backward);
  return {loss, probs};
}

/// Closed-form KL(q || p) for diagonal Gaussians with q = N(mu, softplus(rho)^2)
/// and p = N(prior_mu, prior_sigma^2), summed over all elements.
template <typename T>
double gaussian_kl_value(std::span<const T> mu, std::span<const T> rho,
                         std::span<const T> prior_mu, std::span<const T> prior_sigma) {
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double sq = softplus_value(static_cast<double>(rho[i]));
    const double sp = prior_sigma[i];
    const double dm = static_cast<double>(mu[i]) - static_cast<double>(prior_mu[i]);
    total += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
  }
  return total;
}

template <typename T>
Var<T> gaussian_kl(Graph<T>& g, const Var<T>& mu, const Var<T>& rho,
                   const Var<T>& prior_mu, const Var<T>& prior_sigma) {
  expect_same_shape(mu->shape, rho->shape, "gaussian_kl mu/rho");
  expect_same_shape(mu->shape, prior_mu->shape, "gaussian_kl prior_mu");
  expect_same_shape(mu->shape, prior_sigma->shape, "gaussian_kl prior_sigma");
  for (T s : prior_sigma->data) {
    if (!(s > T{0})) throw std::domain_error("gaussian_kl: prior sigma must be positive");
  }
  auto out = detail::output_like<T>(Shape{});
  auto forward = [=] {
    out->data[0] = static_cast<T>(gaussian_kl_value<T>(mu->data, rho->data,
                                                        prior_mu->data, prior_sigma->data));
  };
  auto backward = [=] {
    const T d = out->grad[0];
    if (T* mg = detail::grad_of(mu)) {
      for (std::size_t i = 0; i < mu->numel(); ++i) {
        const T sp = prior_sigma->data[i];
        mg[i] += d * (mu->data[i] - prior_mu->data[i]) / (sp * sp);
      }
    }
    if (T* rg = detail::grad_of(rho)) {
      for (std::size_t i = 0; i < rho->numel(); ++i) {
        const T sq = softplus_value(rho->data[i]);
        const T sp = prior_sigma->data[i];
        rg[i] += d * (-T{1} / sq + sq / (sp * sp)) * sigmoid_value(rho->data[i]);
      }
    }
  };
  return g.record("gaussian_kl", {mu, rho}, out, forward, backward);
}

}  // namespace poisonguard
