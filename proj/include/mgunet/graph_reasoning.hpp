#pragma once

// Graph reasoning block and the multi-scale global reasoning module.
//
// The block projects a feature map onto a small set of latent nodes, runs one
// graph convolution over the node features and projects the result back,
// adding it to the input as a residual.

#include <array>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

/// Intermediates of one graph reasoning pass, for inspection in tests.
struct GrbTrace {
  std::vector<Tensor> node_features;  // per batch item, [C_r, C_n]
  std::vector<Tensor> graph_output;   // per batch item, [C_r, C_n]
  Tensor residual;                    // M, [N, C, H, W]
};

class GraphReasoningBlock {
 public:
  GraphReasoningBlock() = default;
  GraphReasoningBlock(std::size_t channels, std::size_t reduced, std::size_t nodes, Rng& rng)
      : channels_(channels), reduced_(reduced), nodes_(nodes) {
    if (channels == 0 || reduced == 0 || nodes == 0) {
      throw ConfigError("graph reasoning block needs positive channel/node counts");
    }
    if (reduced >= channels) {
      throw ConfigError("graph reasoning block: reduced channels (" + std::to_string(reduced) +
                        ") must be below input channels (" + std::to_string(channels) + ")");
    }
    reduce_ = Conv2d(channels, reduced, 1, rng);
    node_proj_ = Conv2d(channels, nodes, 1, rng);
    inverse_proj_ = Conv2d(channels, nodes, 1, rng);
    adjacency_ = Tensor::zeros({nodes, nodes}, true);
    state_weights_ = he_uniform({reduced, reduced}, reduced, rng);
    expand_ = Conv2d(reduced, channels, 1, rng);
    expand_.zero();
  }

  Tensor forward(const Tensor& x, GrbTrace* trace = nullptr) const {
    const auto d = detail::dims4(x, "graph reasoning block");
    check_consistency();
    if (d.c != channels_) {
      throw ConfigError("graph reasoning block built for " + std::to_string(channels_) +
                        " channels, got input " + to_string(x.shape()));
    }
    const auto pixels = d.plane();
    if (pixels < nodes_) {
      throw ConfigError("graph reasoning block: " + std::to_string(nodes_) +
                        " nodes exceed the " + std::to_string(pixels) + " pixels of " +
                        to_string(x.shape()));
    }
    const auto reduced_all = reduce_.forward(x);
    const auto assign_all = node_proj_.forward(x);
    const auto inverse_all = inverse_proj_.forward(x);

    std::vector<double> eye(nodes_ * nodes_, 0.0);
    for (std::size_t i = 0; i < nodes_; ++i) eye[i * nodes_ + i] = 1.0;
    const auto propagation = sub(Tensor::from_values({nodes_, nodes_}, std::move(eye)), adjacency_);

    std::vector<Tensor> projected;
    for (std::size_t n = 0; n < d.n; ++n) {
      auto item = [&](const Tensor& t) { return d.n == 1 ? t : batch_item(t, n); };
      const auto xr = reshape(item(reduced_all), {reduced_, pixels});
      const auto xa = reshape(item(assign_all), {nodes_, pixels});
      const auto xd = reshape(item(inverse_all), {nodes_, pixels});
      const auto node_features = matmul(xr, transpose2d(xa));
      const auto z = relu(matmul(state_weights_, matmul(node_features, propagation)));
      projected.push_back(reshape(matmul(z, xd), {1, reduced_, d.h, d.w}));
      if (trace) {
        trace->node_features.push_back(node_features);
        trace->graph_output.push_back(z);
      }
    }
    const auto back = d.n == 1 ? projected.front() : concat_batch(projected);
    auto m = expand_.forward(back);
    if (trace) trace->residual = m;
    return add(m, x);
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    reduce_.collect(join_name(prefix, "reduce"), out);
    node_proj_.collect(join_name(prefix, "node_proj"), out);
    inverse_proj_.collect(join_name(prefix, "inverse_proj"), out);
    out.push_back({join_name(prefix, "adjacency"), adjacency_});
    out.push_back({join_name(prefix, "state_weights"), state_weights_});
    expand_.collect(join_name(prefix, "expand"), out);
  }

  std::size_t channels() const { return channels_; }
  std::size_t reduced() const { return reduced_; }
  std::size_t nodes() const { return nodes_; }

  Conv2d& reduce() { return reduce_; }
  Conv2d& node_projection() { return node_proj_; }
  Conv2d& inverse_projection() { return inverse_proj_; }
  Tensor& adjacency() { return adjacency_; }
  Tensor& state_weights() { return state_weights_; }
  Conv2d& expand() { return expand_; }

 private:
  void check_consistency() const {
    const bool ok = reduce_.out_channels() == reduced_ && node_proj_.out_channels() == nodes_ &&
                    inverse_proj_.out_channels() == nodes_ &&
                    adjacency_.shape() == Shape{nodes_, nodes_} &&
                    state_weights_.shape() == Shape{reduced_, reduced_} &&
                    expand_.in_channels() == reduced_ && expand_.out_channels() == channels_;
    if (!ok) throw ConfigError("graph reasoning block parameters disagree with C_r/C_n");
  }

  std::size_t channels_ = 0;
  std::size_t reduced_ = 0;
  std::size_t nodes_ = 0;
  Conv2d reduce_;
  Conv2d node_proj_;
  Conv2d inverse_proj_;
  Tensor adjacency_;
  Tensor state_weights_;
  Conv2d expand_;
};

/// Replicate-pads the bottom/right edges up to the next multiple of `kernel`,
/// then average-pools with a square kernel (ceil-mode pooling).
inline Tensor pool_partition(const Tensor& x, std::size_t kernel) {
  const auto d = detail::dims4(x, "pool_partition");
  auto round_up = [kernel](std::size_t v) { return (v + kernel - 1) / kernel * kernel; };
  const auto padded = replicate_pad(x, round_up(d.h) - d.h, round_up(d.w) - d.w);
  return avg_pool2d(padded, Pair2::square(kernel));
}

inline constexpr std::array<std::size_t, 4> kBranchPooling{1, 2, 3, 5};

struct MgrmConfig {
  std::size_t channels = 0;
  std::size_t reduced = 0;                   // C_r, shared by all branches
  std::array<std::size_t, 4> nodes{};        // C_n per branch
  bool graph_reasoning = true;               // GRB in each branch
  bool multi_scale = true;                   // pooled branches 2..4
};

/// Four-branch module: branch b pools by kBranchPooling[b] (branch 0 keeps
/// full resolution), reasons over the graph, upsamples back and the branches
/// are concatenated and fused by a 1x1 convolution. With `multi_scale` off
/// only the full-resolution branch remains and no fusion is applied.
class Mgrm {
 public:
  Mgrm() = default;
  Mgrm(const MgrmConfig& config, Rng& rng) : config_(config) {
    if (!config.graph_reasoning && !config.multi_scale) {
      throw ConfigError("multi-scale reasoning module needs graph reasoning or multi-scale pooling");
    }
    const std::size_t branches = config.multi_scale ? 4 : 1;
    if (config.graph_reasoning) {
      for (std::size_t b = 0; b < branches; ++b) {
        blocks_.emplace_back(config.channels, config.reduced, config.nodes[b], rng);
      }
    }
    if (config.multi_scale) fuse_ = Conv2d(4 * config.channels, config.channels, 1, rng);
  }

  /// `concatenated` (optional) receives the pre-fusion 4C-channel map.
  Tensor forward(const Tensor& x, Tensor* concatenated = nullptr) const {
    const auto d = detail::dims4(x, "multi-scale reasoning module");
    if (d.h < 5 || d.w < 5) {
      throw ConfigError("multi-scale reasoning module needs at least 5x5 input, got " +
                        to_string(x.shape()));
    }
    auto reason = [&](std::size_t b, const Tensor& t) {
      return config_.graph_reasoning ? blocks_[b].forward(t) : t;
    };
    if (!config_.multi_scale) return reason(0, x);
    std::vector<Tensor> branches{reason(0, x)};
    for (std::size_t b = 1; b < 4; ++b) {
      const auto pooled = pool_partition(x, kBranchPooling[b]);
      branches.push_back(bilinear_upsample(reason(b, pooled), d.h, d.w));
    }
    auto cat = concat_channels(branches);
    if (concatenated) *concatenated = cat;
    return fuse_.forward(cat);
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(join_name(prefix, "branch" + std::to_string(b)), out);
    }
    if (config_.multi_scale) fuse_.collect(join_name(prefix, "fuse"), out);
  }

  const MgrmConfig& config() const { return config_; }
  std::vector<GraphReasoningBlock>& blocks() { return blocks_; }
  Conv2d& fuse() { return fuse_; }

 private:
  MgrmConfig config_;
  std::vector<GraphReasoningBlock> blocks_;
  Conv2d fuse_;
};

}  // namespace mgu
