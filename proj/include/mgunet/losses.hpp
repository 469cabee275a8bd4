#pragma once

// Segmentation losses on per-pixel class probabilities.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mgunet/classes.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

inline constexpr double kDiceSmoothing = 1e-6;
inline constexpr double kProbabilityFloor = 1e-12;

/// One-hot [N, classes, H, W] encoding of a batch of label maps after mapping
/// every label through `project`.
inline Tensor one_hot(const std::vector<LabelMap>& maps, std::size_t classes,
                      const std::function<std::uint8_t(std::uint8_t)>& project = {}) {
  if (maps.empty()) throw DimensionError("one_hot: empty batch");
  const auto h = maps[0].height;
  const auto w = maps[0].width;
  std::vector<double> v(maps.size() * classes * h * w, 0.0);
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].height != h || maps[n].width != w) {
      throw DimensionError("one_hot: label maps differ in size");
    }
    for (std::size_t i = 0; i < h * w; ++i) {
      const auto label = project ? project(maps[n].labels[i]) : maps[n].labels[i];
      if (label >= classes) {
        throw DataError("label " + std::to_string(label) + " outside 0.." +
                        std::to_string(classes - 1));
      }
      v[(n * classes + label) * h * w + i] = 1.0;
    }
  }
  return Tensor::from_values({maps.size(), classes, h, w}, std::move(v));
}

/// Soft Dice loss 1 - (1/M) sum_c (2 sum p g + eps) / (sum p + sum g + eps),
/// with sums over batch and pixels.
inline Tensor dice_loss(const Tensor& probs, const Tensor& target) {
  const auto d = detail::dims4(probs, "dice_loss");
  if (target.shape() != probs.shape()) {
    throw DimensionError("dice_loss: prediction " + to_string(probs.shape()) +
                         " and target " + to_string(target.shape()) + " differ");
  }
  const auto plane = d.plane();
  std::vector<double> inter(d.c, 0.0), psum(d.c, 0.0), gsum(d.c, 0.0);
  const auto p = probs.values();
  const auto g = target.values();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto base = (n * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        inter[c] += p[base + i] * g[base + i];
        psum[c] += p[base + i];
        gsum[c] += g[base + i];
      }
    }
  }
  double mean_dice = 0.0;
  for (std::size_t c = 0; c < d.c; ++c) {
    mean_dice += (2.0 * inter[c] + kDiceSmoothing) / (psum[c] + gsum[c] + kDiceSmoothing);
  }
  mean_dice /= static_cast<double>(d.c);
  return Tensor::make_result(
      {1}, {1.0 - mean_dice}, {probs, target}, "dice_loss",
      [d, inter = std::move(inter), psum = std::move(psum), gsum = std::move(gsum)](
          detail::Node& self) {
        auto& probs = *self.inputs[0];
        if (!probs.requires_grad) return;
        const auto& g = self.inputs[1]->value;
        auto& grad = probs.grad_buffer();
        const auto plane = d.plane();
        const double scale = -self.grad[0] / static_cast<double>(d.c);
        for (std::size_t c = 0; c < d.c; ++c) {
          const double denom = psum[c] + gsum[c] + kDiceSmoothing;
          const double numer = 2.0 * inter[c] + kDiceSmoothing;
          const double inv2 = 1.0 / (denom * denom);
          for (std::size_t n = 0; n < d.n; ++n) {
            const auto base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              grad[base + i] += scale * (2.0 * g[base + i] * denom - numer) * inv2;
            }
          }
        }
      });
}

/// Cross-entropy -(1 / (M N H W)) sum g log(max(p, 1e-12)): averaged over
/// classes as well as batch and pixels.
inline Tensor ce_loss(const Tensor& probs, const Tensor& target) {
  const auto d = detail::dims4(probs, "ce_loss");
  if (target.shape() != probs.shape()) {
    throw DimensionError("ce_loss: prediction " + to_string(probs.shape()) + " and target " +
                         to_string(target.shape()) + " differ");
  }
  const double inv = 1.0 / static_cast<double>(probs.numel());
  const auto p = probs.values();
  const auto g = target.values();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i] != 0.0) s += g[i] * std::log(std::max(p[i], kProbabilityFloor));
  }
  return Tensor::make_result({1}, {-s * inv}, {probs, target}, "ce_loss",
                             [inv](detail::Node& self) {
                               auto& probs = *self.inputs[0];
                               if (!probs.requires_grad) return;
                               const auto& g = self.inputs[1]->value;
                               auto& grad = probs.grad_buffer();
                               for (std::size_t i = 0; i < grad.size(); ++i) {
                                 const double pv = probs.value[i];
                                 if (g[i] != 0.0 && pv > kProbabilityFloor) {
                                   grad[i] -= self.grad[0] * inv * g[i] / pv;
                                 }
                               }
                             });
}

}  // namespace mgu
