#pragma once

// Differentiable tensor operators. 4-D data is laid out [N, C, H, W],
// row-major. Each op computes its forward values eagerly and registers a
// closure that accumulates input gradients from the output gradient.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

/// (height, width) pair used for kernels, strides and padding.
struct Pair2 {
  std::size_t h = 1;
  std::size_t w = 1;
  static constexpr Pair2 square(std::size_t v) { return {v, v}; }
  friend bool operator==(const Pair2&, const Pair2&) = default;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
  }
}

struct Dims4 {
  std::size_t n, c, h, w;
  std::size_t plane() const { return h * w; }
};

inline Dims4 dims4(const Tensor& t, const char* op) {
  require_rank(t, 4, op);
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

// `derivative(x, y)` receives the input and output value of one element.
template <typename F, typename D>
Tensor unary_elementwise(const Tensor& x, const char* op, F&& forward, D derivative) {
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, op,
                             [derivative](Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               auto& g = in.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] * derivative(in.value[i], self.value[i]);
                               }
                             });
}

inline void check_pool_geometry(const Dims4& d, Pair2 kernel, Pair2 stride, const char* op) {
  if (kernel.h == 0 || kernel.w == 0 || stride.h == 0 || stride.w == 0) {
    throw DimensionError(std::string(op) + ": kernel and stride must be positive");
  }
  if (kernel.h > d.h || kernel.w > d.w || (d.h - kernel.h) % stride.h != 0 ||
      (d.w - kernel.w) % stride.w != 0) {
    throw DimensionError(std::string(op) + ": spatial size " + std::to_string(d.h) + "x" +
                         std::to_string(d.w) + " is not divisible by pooling kernel " +
                         std::to_string(kernel.h) + "x" + std::to_string(kernel.w) +
                         " / stride " + std::to_string(stride.h) + "x" +
                         std::to_string(stride.w));
  }
}

// Unfolds one image [Cin,H,W] into columns [Cin*kh*kw, Ho*Wo].
inline void im2col(const double* image, std::size_t cin, std::size_t h, std::size_t w,
                   Pair2 k, Pair2 stride, Pair2 pad, std::size_t ho, std::size_t wo,
                   double* col) {
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ki = 0; ki < k.h; ++ki) {
      for (std::size_t kj = 0; kj < k.w; ++kj) {
        double* row = col + ((ci * k.h + ki) * k.w + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride.h + ki) -
                          static_cast<std::ptrdiff_t>(pad.h);
          double* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = image + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride.w + kj) -
                            static_cast<std::ptrdiff_t>(pad.w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into the image.
inline void col2im_add(const double* col, std::size_t cin, std::size_t h, std::size_t w,
                       Pair2 k, Pair2 stride, Pair2 pad, std::size_t ho, std::size_t wo,
                       double* image) {
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ki = 0; ki < k.h; ++ki) {
      for (std::size_t kj = 0; kj < k.w; ++kj) {
        const double* row = col + ((ci * k.h + ki) * k.w + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride.h + ki) -
                          static_cast<std::ptrdiff_t>(pad.h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = image + (ci * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride.w + kj) -
                            static_cast<std::ptrdiff_t>(pad.w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Source index pair and blend weight for align-corners=false resampling.
struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto lo = std::min(static_cast<std::size_t>(src), in - 1);
    auto hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor relu(const Tensor& x) {
  auto& monitor = detail::kink_monitor();
  if (monitor.active) {
    const auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) monitor.mix(i);
    }
    monitor.mix(xv.size());
  }
  return detail::unary_elementwise(
      x, "relu", [](double v) { return v < 0.0 ? 0.0 : v; },  // NaN passes through
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Natural logarithm; inputs must be strictly positive.
inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw NumericalError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary_elementwise(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor scalar_mul(const Tensor& x, double a) {
  return detail::unary_elementwise(
      x, "scalar_mul", [a](double v) { return a * v; }, [a](double, double) { return a; });
}

inline Tensor add_scalar(const Tensor& x, double b) {
  return detail::unary_elementwise(
      x, "add_scalar", [b](double v) { return v + b; }, [](double, double) { return 1.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    if (a.requires_grad) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value[i];
    }
    if (b.requires_grad) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value[i];
    }
  });
}

// ------------------------------------------------------------------ reductions

inline Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_result({1}, {s}, {x}, "reduce_sum", [](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor reduce_mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return Tensor::make_result({1}, {s * inv}, {x}, "reduce_mean", [inv](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (double& v : g) v += self.grad[0] * inv;
  });
}

// ------------------------------------------------------------------ reshaping

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  }
  Buffer out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, "reshape",
                             [](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

inline Tensor transpose2d(const Tensor& x) {
  detail::require_rank(x, 2, "transpose2d");
  const auto rows = x.dim(0);
  const auto cols = x.dim(1);
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = xv[i * cols + j];
  return Tensor::make_result({cols, rows}, std::move(out), {x}, "transpose2d",
                             [rows, cols](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < rows; ++i)
                                 for (std::size_t j = 0; j < cols; ++j)
                                   g[i * cols + j] += self.grad[j * rows + i];
                             });
}

/// Concatenates 4-D tensors along the channel axis, preserving order.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const auto first = detail::dims4(parts[0], "concat_channels");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const auto d = detail::dims4(p, "concat_channels");
    if (d.n != first.n || d.h != first.h || d.w != first.w) {
      throw DimensionError("concat_channels: incompatible shapes " + to_string(parts[0].shape()) +
                           " and " + to_string(p.shape()));
    }
    channels += d.c;
  }
  const auto plane = first.plane();
  Buffer out(first.n * channels * plane);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto c = p.dim(1);
    const auto pv = p.values();
    for (std::size_t n = 0; n < first.n; ++n) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(n * c * plane), c * plane,
                  out.begin() + static_cast<std::ptrdiff_t>((n * channels + offset) * plane));
    }
    offset += c;
  }
  return Tensor::make_result(
      {first.n, channels, first.h, first.w}, std::move(out), parts, "concat_channels",
      [offsets, channels, plane, batch = first.n](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          auto& in = *self.inputs[k];
          if (!in.requires_grad) continue;
          const auto c = in.shape[1];
          auto& g = in.grad_buffer();
          for (std::size_t n = 0; n < batch; ++n) {
            const double* src = self.grad.data() + (n * channels + offsets[k]) * plane;
            double* dst = g.data() + n * c * plane;
            for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Channels [begin, begin + count) of a 4-D tensor.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  const auto d = detail::dims4(x, "slice_channels");
  if (count == 0 || begin + count > d.c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " + to_string(x.shape()));
  }
  const auto plane = d.plane();
  Buffer out(d.n * count * plane);
  const auto xv = x.values();
  for (std::size_t n = 0; n < d.n; ++n) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((n * d.c + begin) * plane),
                count * plane, out.begin() + static_cast<std::ptrdiff_t>(n * count * plane));
  }
  return Tensor::make_result({d.n, count, d.h, d.w}, std::move(out), {x}, "slice_channels",
                             [d, begin, count](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               const auto plane = d.plane();
                               for (std::size_t n = 0; n < d.n; ++n) {
                                 const double* src = self.grad.data() + n * count * plane;
                                 double* dst = g.data() + (n * d.c + begin) * plane;
                                 for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                               }
                             });
}

/// Item `index` of the batch axis, keeping a leading extent of 1.
inline Tensor batch_item(const Tensor& x, std::size_t index) {
  if (x.rank() < 1 || index >= x.dim(0)) {
    throw DimensionError("batch_item: index " + std::to_string(index) + " outside " +
                         to_string(x.shape()));
  }
  auto shape = x.shape();
  shape[0] = 1;
  const auto stride = x.numel() / x.dim(0);
  Buffer out(x.values().begin() + static_cast<std::ptrdiff_t>(index * stride),
                          x.values().begin() + static_cast<std::ptrdiff_t>((index + 1) * stride));
  return Tensor::make_result(std::move(shape), std::move(out), {x}, "batch_item",
                             [index, stride](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < stride; ++i)
                                 g[index * stride + i] += self.grad[i];
                             });
}

inline Tensor concat_batch(const std::vector<Tensor>& items) {
  if (items.empty()) throw DimensionError("concat_batch: no inputs");
  auto shape = items[0].shape();
  std::size_t total = 0;
  Buffer out;
  for (const auto& t : items) {
    auto s = t.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw DimensionError("concat_batch: incompatible shapes " + to_string(shape) + " and " +
                           to_string(s));
    }
    total += s[0];
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  shape[0] = total;
  return Tensor::make_result(std::move(shape), std::move(out), items, "concat_batch",
                             [](detail::Node& self) {
                               std::size_t offset = 0;
                               for (auto& in : self.inputs) {
                                 const auto n = in->value.size();
                                 if (in->requires_grad) {
                                   auto& g = in->grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                     g[i] += self.grad[offset + i];
                                 }
                                 offset += n;
                               }
                             });
}

/// Extends the bottom and right edges by repeating the last row / column.
inline Tensor replicate_pad(const Tensor& x, std::size_t pad_bottom, std::size_t pad_right) {
  const auto d = detail::dims4(x, "replicate_pad");
  if (pad_bottom == 0 && pad_right == 0) return x;
  const auto ho = d.h + pad_bottom;
  const auto wo = d.w + pad_right;
  Buffer out(d.n * d.c * ho * wo);
  const auto xv = x.values();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    for (std::size_t y = 0; y < ho; ++y) {
      const auto sy = std::min(y, d.h - 1);
      for (std::size_t xx = 0; xx < wo; ++xx) {
        out[(p * ho + y) * wo + xx] = xv[(p * d.h + sy) * d.w + std::min(xx, d.w - 1)];
      }
    }
  }
  return Tensor::make_result({d.n, d.c, ho, wo}, std::move(out), {x}, "replicate_pad",
                             [d, ho, wo](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t p = 0; p < d.n * d.c; ++p)
                                 for (std::size_t y = 0; y < ho; ++y)
                                   for (std::size_t xx = 0; xx < wo; ++xx)
                                     g[(p * d.h + std::min(y, d.h - 1)) * d.w +
                                       std::min(xx, d.w - 1)] += self.grad[(p * ho + y) * wo + xx];
                             });
}

// ------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Buffer out(m * n);
  using detail::MapConstMat;
  using detail::MapMat;
  MapMat(out.data(), m, n).noalias() =
      MapConstMat(a.values().data(), m, k) * MapConstMat(b.values().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, "matmul",
                             [m, k, n](detail::Node& self) {
                               auto& a = *self.inputs[0];
                               auto& b = *self.inputs[1];
                               MapConstMat dy(self.grad.data(), m, n);
                               if (a.requires_grad) {
                                 MapMat(a.grad_buffer().data(), m, k).noalias() +=
                                     dy * MapConstMat(b.value.data(), k, n).transpose();
                               }
                               if (b.requires_grad) {
                                 MapMat(b.grad_buffer().data(), k, n).noalias() +=
                                     MapConstMat(a.value.data(), m, k).transpose() * dy;
                               }
                             });
}

/// 2-D cross-correlation (no kernel flip). `bias` may be an undefined tensor.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     Pair2 stride = {1, 1}, Pair2 padding = {0, 0}) {
  const auto d = detail::dims4(input, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const auto cout = weight.dim(0);
  const Pair2 k{weight.dim(2), weight.dim(3)};
  if (weight.dim(1) != d.c) {
    throw DimensionError("conv2d: input has " + std::to_string(d.c) +
                         " channels but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape " + to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  if (stride.h == 0 || stride.w == 0) throw DimensionError("conv2d: stride must be positive");
  if (k.h > d.h + 2 * padding.h || k.w > d.w + 2 * padding.w) {
    throw DimensionError("conv2d: kernel " + std::to_string(k.h) + "x" + std::to_string(k.w) +
                         " larger than padded input " + to_string(input.shape()));
  }
  const auto ho = (d.h + 2 * padding.h - k.h) / stride.h + 1;
  const auto wo = (d.w + 2 * padding.w - k.w) / stride.w + 1;
  const auto kdim = d.c * k.h * k.w;
  const auto pixels = ho * wo;
  const bool pointwise = k.h == 1 && k.w == 1 && stride == Pair2{1, 1} && padding == Pair2{0, 0};

  using detail::MapConstMat;
  using detail::MapMat;
  Buffer out(d.n * cout * pixels);
  Buffer col(pointwise ? 0 : kdim * pixels);
  MapConstMat wmat(weight.values().data(), cout, kdim);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* image = input.values().data() + n * d.c * d.plane();
    const double* cols = image;
    if (!pointwise) {
      detail::im2col(image, d.c, d.h, d.w, k, stride, padding, ho, wo, col.data());
      cols = col.data();
    }
    MapMat y(out.data() + n * cout * pixels, cout, pixels);
    y.noalias() = wmat * MapConstMat(cols, kdim, pixels);
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) y.row(co).array() += bias.value(co);
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      {d.n, cout, ho, wo}, std::move(out), std::move(inputs), "conv2d",
      [d, cout, k, stride, padding, ho, wo, kdim, pixels, pointwise](detail::Node& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        detail::Node* b = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        Buffer col(pointwise ? 0 : kdim * pixels);
        Buffer dcol(pointwise ? 0 : kdim * pixels);
        MapConstMat wmat(w.value.data(), cout, kdim);
        for (std::size_t n = 0; n < d.n; ++n) {
          MapConstMat dy(self.grad.data() + n * cout * pixels, cout, pixels);
          const double* image = x.value.data() + n * d.c * d.plane();
          if (w.requires_grad) {
            const double* cols = image;
            if (!pointwise) {
              detail::im2col(image, d.c, d.h, d.w, k, stride, padding, ho, wo, col.data());
              cols = col.data();
            }
            MapMat(w.grad_buffer().data(), cout, kdim).noalias() +=
                dy * MapConstMat(cols, kdim, pixels).transpose();
          }
          if (b && b->requires_grad) {
            auto& gb = b->grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) gb[co] += dy.row(co).sum();
          }
          if (x.requires_grad) {
            double* gx = x.grad_buffer().data() + n * d.c * d.plane();
            if (pointwise) {
              MapMat(gx, kdim, pixels).noalias() += wmat.transpose() * dy;
            } else {
              MapMat(dcol.data(), kdim, pixels).noalias() = wmat.transpose() * dy;
              detail::col2im_add(dcol.data(), d.c, d.h, d.w, k, stride, padding, ho, wo, gx);
            }
          }
        }
      });
}

// -------------------------------------------------------------------- pooling

/// Window maximum. Backward routes each window's gradient to its first
/// (row-major) maximal element.
inline Tensor max_pool2d(const Tensor& x, Pair2 kernel, Pair2 stride) {
  const auto d = detail::dims4(x, "max_pool2d");
  detail::check_pool_geometry(d, kernel, stride, "max_pool2d");
  const auto ho = (d.h - kernel.h) / stride.h + 1;
  const auto wo = (d.w - kernel.w) / stride.w + 1;
  Buffer out(d.n * d.c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.values();
  auto& monitor = detail::kink_monitor();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (p * d.h + oy * stride.h) * d.w + ox * stride.w;
        for (std::size_t ky = 0; ky < kernel.h; ++ky) {
          for (std::size_t kx = 0; kx < kernel.w; ++kx) {
            const auto idx = (p * d.h + oy * stride.h + ky) * d.w + ox * stride.w + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const auto o = (p * ho + oy) * wo + ox;
        out[o] = xv[best];
        argmax[o] = best;
        if (monitor.active) monitor.mix(best);
      }
    }
  }
  return Tensor::make_result({d.n, d.c, ho, wo}, std::move(out), {x}, "max_pool2d",
                             [argmax = std::move(argmax)](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < argmax.size(); ++o)
                                 g[argmax[o]] += self.grad[o];
                             });
}

inline Tensor max_pool2d(const Tensor& x, Pair2 kernel) { return max_pool2d(x, kernel, kernel); }

/// Window mean; backward spreads the gradient uniformly over the window.
inline Tensor avg_pool2d(const Tensor& x, Pair2 kernel, Pair2 stride) {
  const auto d = detail::dims4(x, "avg_pool2d");
  detail::check_pool_geometry(d, kernel, stride, "avg_pool2d");
  const auto ho = (d.h - kernel.h) / stride.h + 1;
  const auto wo = (d.w - kernel.w) / stride.w + 1;
  const double inv = 1.0 / static_cast<double>(kernel.h * kernel.w);
  Buffer out(d.n * d.c * ho * wo);
  const auto xv = x.values();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < kernel.h; ++ky)
          for (std::size_t kx = 0; kx < kernel.w; ++kx)
            s += xv[(p * d.h + oy * stride.h + ky) * d.w + ox * stride.w + kx];
        out[(p * ho + oy) * wo + ox] = s * inv;
      }
    }
  }
  return Tensor::make_result(
      {d.n, d.c, ho, wo}, std::move(out), {x}, "avg_pool2d",
      [d, kernel, stride, ho, wo, inv](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < d.n * d.c; ++p)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const double v = self.grad[(p * ho + oy) * wo + ox] * inv;
              for (std::size_t ky = 0; ky < kernel.h; ++ky)
                for (std::size_t kx = 0; kx < kernel.w; ++kx)
                  g[(p * d.h + oy * stride.h + ky) * d.w + ox * stride.w + kx] += v;
            }
      });
}

inline Tensor avg_pool2d(const Tensor& x, Pair2 kernel) { return avg_pool2d(x, kernel, kernel); }

// ------------------------------------------------------------------ resampling

/// Bilinear resize with the align-corners=false convention: output index i
/// samples source coordinate (i + 0.5) * in / out - 0.5, clamped to the edge.
inline Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const auto d = detail::dims4(x, "bilinear_upsample");
  if (out_h < d.h || out_w < d.w) {
    throw DimensionError("bilinear_upsample: target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " smaller than input " + to_string(x.shape()));
  }
  auto ty = detail::lerp_taps(d.h, out_h);
  auto tx = detail::lerp_taps(d.w, out_w);
  Buffer out(d.n * d.c * out_h * out_w);
  const auto xv = x.values();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const double* src = xv.data() + p * d.plane();
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      const double* r0 = src + a.lo * d.w;
      const double* r1 = src + a.hi * d.w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const double top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * b.frac;
        const double bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * b.frac;
        dst[i * out_w + j] = top + (bot - top) * a.frac;
      }
    }
  }
  return Tensor::make_result(
      {d.n, d.c, out_h, out_w}, std::move(out), {x}, "bilinear_upsample",
      [d, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < d.n * d.c; ++p) {
          double* dst = g.data() + p * d.plane();
          const double* src = self.grad.data() + p * out_h * out_w;
          for (std::size_t i = 0; i < out_h; ++i) {
            const auto& a = ty[i];
            for (std::size_t j = 0; j < out_w; ++j) {
              const auto& b = tx[j];
              const double v = src[i * out_w + j];
              const double v0 = v * (1.0 - a.frac);
              const double v1 = v * a.frac;
              dst[a.lo * d.w + b.lo] += v0 * (1.0 - b.frac);
              dst[a.lo * d.w + b.hi] += v0 * b.frac;
              dst[a.hi * d.w + b.lo] += v1 * (1.0 - b.frac);
              dst[a.hi * d.w + b.hi] += v1 * b.frac;
            }
          }
        }
      });
}

// -------------------------------------------------------------- normalization

/// Per-pixel softmax over the channel axis, stabilised by max subtraction.
inline Tensor softmax_channels(const Tensor& x) {
  const auto d = detail::dims4(x, "softmax_channels");
  const auto plane = d.plane();
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* src = xv.data() + n * d.c * plane;
    double* dst = out.data() + n * d.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < d.c; ++c) m = std::max(m, src[c * plane + i]);
      double s = 0.0;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double e = std::exp(src[c * plane + i] - m);
        dst[c * plane + i] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t c = 0; c < d.c; ++c) dst[c * plane + i] *= inv;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, "softmax_channels",
                             [d](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               const auto plane = d.plane();
                               for (std::size_t n = 0; n < d.n; ++n) {
                                 const std::size_t base = n * d.c * plane;
                                 for (std::size_t i = 0; i < plane; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < d.c; ++c) {
                                     const auto idx = base + c * plane + i;
                                     dot += self.value[idx] * self.grad[idx];
                                   }
                                   for (std::size_t c = 0; c < d.c; ++c) {
                                     const auto idx = base + c * plane + i;
                                     g[idx] += self.value[idx] * (self.grad[idx] - dot);
                                   }
                                 }
                               }
                             });
}

inline constexpr double kChannelNormEps = 1e-5;

/// Normalizes every (item, channel) plane to zero mean / unit variance over
/// H x W, then applies a learned per-channel scale and shift. Statistics are
/// always taken from the current input; there are no running averages.
inline Tensor channel_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                           double eps = kChannelNormEps) {
  const auto d = detail::dims4(x, "channel_norm");
  if (scale.rank() != 1 || shift.rank() != 1 || scale.dim(0) != d.c || shift.dim(0) != d.c) {
    throw DimensionError("channel_norm: scale/shift must have " + std::to_string(d.c) +
                         " entries");
  }
  const auto plane = d.plane();
  Buffer out(x.numel());
  Buffer xhat(x.numel());
  Buffer inv_std(d.n * d.c);
  const auto xv = x.values();
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const double* src = xv.data() + p * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += src[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(plane);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = is;
    const double gamma = scale.value(p % d.c);
    const double beta = shift.value(p % d.c);
    for (std::size_t i = 0; i < plane; ++i) {
      const double h = (src[i] - mean) * is;
      xhat[p * plane + i] = h;
      out[p * plane + i] = gamma * h + beta;
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, scale, shift}, "channel_norm",
      [d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& x = *self.inputs[0];
        auto& scale = *self.inputs[1];
        auto& shift = *self.inputs[2];
        const auto plane = d.plane();
        const double m = static_cast<double>(plane);
        for (std::size_t p = 0; p < d.n * d.c; ++p) {
          const auto c = p % d.c;
          const double* dy = self.grad.data() + p * plane;
          const double* h = xhat.data() + p * plane;
          double sum_dy = 0.0, sum_dy_h = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_dy += dy[i];
            sum_dy_h += dy[i] * h[i];
          }
          if (scale.requires_grad) scale.grad_buffer()[c] += sum_dy_h;
          if (shift.requires_grad) shift.grad_buffer()[c] += sum_dy;
          if (x.requires_grad) {
            const double gamma = scale.value[c];
            const double k = gamma * inv_std[p] / m;
            double* gx = x.grad_buffer().data() + p * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              gx[i] += k * (m * dy[i] - sum_dy - h[i] * sum_dy_h);
            }
          }
        }
      });
}

}  // namespace mgu
