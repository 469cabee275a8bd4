#pragma once

// Parameterized building blocks shared by the graph-reasoning module and the
// U-shape network: named parameters, 2-D convolution, per-channel
// normalization and the conv-norm-relu block.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

using Rng = std::mt19937_64;

/// A named, optionally trainable leaf tensor. Copies share storage with the
/// owning module, so updating `tensor` updates the model.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParameterList = std::vector<Parameter>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

inline void require_unique_names(const ParameterList& params) {
  std::unordered_set<std::string> seen;
  for (const auto& p : params) {
    if (!seen.insert(p.name).second) throw ConfigError("duplicate parameter name '" + p.name + "'");
  }
}

inline std::size_t count_values(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Uniform(-sqrt(6 / fan_in), +sqrt(6 / fan_in)).
inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng,
         bool with_bias = true)
      : padding_(kernel / 2) {
    weight_ = he_uniform({out_channels, in_channels, kernel, kernel},
                         in_channels * kernel * kernel, rng);
    if (with_bias) bias_ = Tensor::zeros({out_channels}, true);
  }

  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight_, bias_, {1, 1}, Pair2::square(padding_));
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({join_name(prefix, "weight"), weight_});
    if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_});
  }

  /// Sets weights (and bias) to zero.
  void zero() {
    for (auto& v : weight_.mutable_values()) v = 0.0;
    if (bias_.defined())
      for (auto& v : bias_.mutable_values()) v = 0.0;
  }

  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::size_t padding_ = 0;
};

class ChannelNorm {
 public:
  ChannelNorm() = default;
  explicit ChannelNorm(std::size_t channels)
      : scale_(Tensor::full({channels}, 1.0, true)), shift_(Tensor::zeros({channels}, true)) {}

  Tensor forward(const Tensor& x) const { return channel_norm(x, scale_, shift_); }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({join_name(prefix, "scale"), scale_});
    out.push_back({join_name(prefix, "shift"), shift_});
  }

 private:
  Tensor scale_;
  Tensor shift_;
};

/// Two rounds of 3x3 conv -> channel norm -> relu. The convolutions carry no
/// bias since the normalization would cancel it.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng)
      : conv1_(in_channels, out_channels, 3, rng, false),
        norm1_(out_channels),
        conv2_(out_channels, out_channels, 3, rng, false),
        norm2_(out_channels) {}

  Tensor forward(const Tensor& x) const {
    auto h = relu(norm1_.forward(conv1_.forward(x)));
    return relu(norm2_.forward(conv2_.forward(h)));
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    conv1_.collect(join_name(prefix, "conv1"), out);
    norm1_.collect(join_name(prefix, "norm1"), out);
    conv2_.collect(join_name(prefix, "conv2"), out);
    norm2_.collect(join_name(prefix, "norm2"), out);
  }

  std::size_t out_channels() const { return conv2_.out_channels(); }

 private:
  Conv2d conv1_;
  ChannelNorm norm1_;
  Conv2d conv2_;
  ChannelNorm norm2_;
};

}  // namespace mgu
