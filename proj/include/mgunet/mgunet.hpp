#pragma once

// U-shape segmentation network: three encoder levels, a reasoning bottleneck
// and three decoder levels joined by skip connections.

#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/graph_reasoning.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

struct MgunetConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 10;
  std::size_t base_channels = 32;
  std::array<std::size_t, 3> pool_schedule{2, 2, 2};
  bool mgrm_enabled = true;
  bool grb_enabled = true;
  bool msp_enabled = true;
  std::size_t reduced_channels = 0;  // 0 selects half the bottleneck width
  std::array<std::size_t, 4> nodes{16, 16, 8, 4};

  /// Pooling (2, 2, 2) of the retinal layer network.
  static MgunetConfig layer_net(std::size_t classes = 10) {
    MgunetConfig c;
    c.num_classes = classes;
    return c;
  }

  /// Pooling (2, 4, 2) of the optic disc network.
  static MgunetConfig disc_net(std::size_t classes = 2) {
    MgunetConfig c;
    c.num_classes = classes;
    c.pool_schedule = {2, 4, 2};
    return c;
  }

  std::size_t bottleneck_channels() const { return 8 * base_channels; }

  std::size_t required_multiple() const {
    return pool_schedule[0] * pool_schedule[1] * pool_schedule[2];
  }

  /// True when the bottleneck carries a reasoning module.
  bool has_reasoning() const { return mgrm_enabled && (grb_enabled || msp_enabled); }

  void validate() const {
    if (in_channels == 0 || num_classes == 0 || base_channels == 0) {
      throw ConfigError("network config: channel and class counts must be positive");
    }
    for (auto f : pool_schedule) {
      if (f < 1) throw ConfigError("network config: pooling factors must be >= 1");
    }
    if (has_reasoning()) {
      const auto reduced = reduced_channels ? reduced_channels : bottleneck_channels() / 2;
      if (reduced == 0 || reduced >= bottleneck_channels()) {
        throw ConfigError("network config: reduced channels must lie in [1, " +
                          std::to_string(bottleneck_channels()) + ")");
      }
      for (auto n : nodes) {
        if (n == 0) throw ConfigError("network config: node counts must be positive");
      }
    }
  }
};

struct MgunetOutput {
  Tensor logits;    // [N, num_classes, H, W]
  Tensor features;  // [N, base_channels, H, W], decoder output before the head
};

class Mgunet {
 public:
  Mgunet() = default;

  Mgunet(const MgunetConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const auto b = config.base_channels;
    const std::array<std::size_t, 3> widths{b, 2 * b, 4 * b};
    std::size_t in = config.in_channels;
    for (std::size_t level = 0; level < 3; ++level) {
      encoder_[level] = ConvBlock(in, widths[level], rng);
      in = widths[level];
    }
    bottleneck_ = ConvBlock(in, config.bottleneck_channels(), rng);
    if (config.has_reasoning()) {
      MgrmConfig m;
      m.channels = config.bottleneck_channels();
      m.reduced = config.reduced_channels ? config.reduced_channels : m.channels / 2;
      m.nodes = config.nodes;
      m.graph_reasoning = config.grb_enabled;
      m.multi_scale = config.msp_enabled;
      reasoning_ = Mgrm(m, rng);
    }
    in = config.bottleneck_channels();
    for (std::size_t level = 3; level-- > 0;) {
      decoder_[level] = ConvBlock(in + widths[level], widths[level], rng);
      in = widths[level];
    }
    head_ = Conv2d(b, config.num_classes, 1, rng);
  }

  /// `bottleneck` (optional) receives the reasoning module's output map.
  MgunetOutput forward(const Tensor& image, Tensor* bottleneck = nullptr) const {
    const auto d = detail::dims4(image, "network input");
    if (d.c != config_.in_channels) {
      throw DimensionError("network expects " + std::to_string(config_.in_channels) +
                           " input channel(s), got " + to_string(image.shape()));
    }
    const auto multiple = config_.required_multiple();
    if (d.h % multiple != 0 || d.w % multiple != 0) {
      throw DimensionError("input " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                           " must be a multiple of " + std::to_string(multiple) +
                           " in both dimensions");
    }
    std::array<Tensor, 3> skips;
    Tensor h = image;
    for (std::size_t level = 0; level < 3; ++level) {
      skips[level] = encoder_[level].forward(h);
      h = max_pool2d(skips[level], Pair2::square(config_.pool_schedule[level]));
    }
    h = bottleneck_.forward(h);
    if (config_.has_reasoning()) h = reasoning_.forward(h);
    if (bottleneck) *bottleneck = h;
    for (std::size_t level = 3; level-- > 0;) {
      const auto& skip = skips[level];
      auto up = bilinear_upsample(h, skip.dim(2), skip.dim(3));
      h = decoder_[level].forward(concat_channels({up, skip}));
    }
    return {head_.forward(h), h};
  }

  ParameterList parameters(const std::string& prefix = "") const {
    ParameterList out;
    for (std::size_t level = 0; level < 3; ++level) {
      encoder_[level].collect(join_name(prefix, "encoder" + std::to_string(level)), out);
    }
    bottleneck_.collect(join_name(prefix, "bottleneck"), out);
    if (config_.has_reasoning()) reasoning_.collect(join_name(prefix, "mgrm"), out);
    for (std::size_t level = 0; level < 3; ++level) {
      decoder_[level].collect(join_name(prefix, "decoder" + std::to_string(level)), out);
    }
    head_.collect(join_name(prefix, "head"), out);
    return out;
  }

  const MgunetConfig& config() const { return config_; }
  Mgrm& reasoning() { return reasoning_; }
  Conv2d& head() { return head_; }

 private:
  MgunetConfig config_;
  std::array<ConvBlock, 3> encoder_;
  ConvBlock bottleneck_;
  Mgrm reasoning_;
  std::array<ConvBlock, 3> decoder_;
  Conv2d head_;
};

}  // namespace mgu
