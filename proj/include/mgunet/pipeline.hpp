#pragma once

// Two-stage segmentation: a disc network finds the optic disc, its soft mask
// removes the disc from the image, a layer network segments the remaining
// retina and a 1x1 fusion head maps the concatenated features and logits of
// both stages to the final 11 classes.

#include <filesystem>
#include <string>
#include <vector>

#include "mgunet/checkpoint.hpp"
#include "mgunet/classes.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/losses.hpp"
#include "mgunet/mgunet.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

/// image * (1 - p_disc), with p_disc the disc channel of `disc_probs`.
inline Tensor mask_apply(const Tensor& image, const Tensor& disc_probs) {
  const auto di = detail::dims4(image, "mask_apply");
  const auto dp = detail::dims4(disc_probs, "mask_apply");
  if (di.c != 1 || dp.c != kDiscNetClasses || di.n != dp.n || di.h != dp.h || di.w != dp.w) {
    throw DimensionError("mask_apply: image " + to_string(image.shape()) +
                         " and disc probabilities " + to_string(disc_probs.shape()) +
                         " are incompatible");
  }
  const auto keep = add_scalar(scalar_mul(slice_channels(disc_probs, 1, 1), -1.0), 1.0);
  return mul(image, keep);
}

/// Architecture switches: `two_stage` off runs one 11-class network; `grb`
/// and `msp` select the bottleneck variant of every network.
struct ModelConfig {
  bool two_stage = true;
  bool grb = true;
  bool msp = true;
  std::size_t base_channels = 32;
  std::size_t reduced_channels = 0;
  std::array<std::size_t, 4> nodes{16, 16, 8, 4};

  MgunetConfig network(std::size_t classes, std::array<std::size_t, 3> schedule) const {
    MgunetConfig c;
    c.num_classes = classes;
    c.base_channels = base_channels;
    c.pool_schedule = schedule;
    c.mgrm_enabled = grb || msp;
    c.grb_enabled = grb;
    c.msp_enabled = msp;
    c.reduced_channels = reduced_channels;
    c.nodes = nodes;
    return c;
  }
  MgunetConfig disc_network() const { return network(kDiscNetClasses, {2, 4, 2}); }
  MgunetConfig layer_network() const { return network(kLayerNetClasses, {2, 2, 2}); }
  MgunetConfig single_network() const { return network(kNumClasses, {2, 2, 2}); }

  std::size_t required_multiple() const { return two_stage ? 16 : 8; }

  std::string describe() const {
    std::string s = two_stage ? "two-stage" : "one-stage";
    if (!grb && !msp) return s + " baseline";
    if (grb && msp) return s + " proposed";
    return s + (grb ? " w/o MSP" : " w/o GRB");
  }
};

struct PipelineOutput {
  Tensor disc_logits;   // [N, 2, H, W]; undefined for one-stage models
  Tensor disc_probs;    // [N, 2, H, W]; undefined for one-stage models
  Tensor masked_image;  // [N, 1, H, W]; undefined for one-stage models
  Tensor layer_logits;  // [N, 10, H, W]; undefined for one-stage models
  Tensor fused_logits;  // [N, 11, H, W]
  Tensor fused_probs;   // [N, 11, H, W]
};

class TwoStageModel {
 public:
  TwoStageModel() = default;

  TwoStageModel(const ModelConfig& config, Rng& rng) : config_(config) {
    if (config.two_stage) {
      disc_net_ = Mgunet(config.disc_network(), rng);
      layer_net_ = Mgunet(config.layer_network(), rng);
      const auto fused_in = 2 * config.base_channels + kDiscNetClasses + kLayerNetClasses;
      fusion_ = Conv2d(fused_in, kNumClasses, 1, rng);
    } else {
      layer_net_ = Mgunet(config.single_network(), rng);
    }
    require_unique_names(parameters());
  }

  PipelineOutput forward(const Tensor& image) const {
    const auto d = detail::dims4(image, "model input");
    const auto multiple = config_.required_multiple();
    if (d.h % multiple != 0 || d.w % multiple != 0) {
      throw DimensionError("input " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                           " must be a multiple of " + std::to_string(multiple) +
                           " in both dimensions");
    }
    PipelineOutput out;
    if (!config_.two_stage) {
      out.fused_logits = layer_net_.forward(image).logits;
      out.fused_probs = softmax_channels(out.fused_logits);
      return out;
    }
    const auto disc = disc_net_.forward(image);
    out.disc_logits = disc.logits;
    out.disc_probs = softmax_channels(disc.logits);
    out.masked_image = mask_apply(image, out.disc_probs);
    const auto layers = layer_net_.forward(out.masked_image);
    out.layer_logits = layers.logits;
    out.fused_logits = fusion_.forward(
        concat_channels({disc.features, disc.logits, layers.features, layers.logits}));
    out.fused_probs = softmax_channels(out.fused_logits);
    return out;
  }

  ParameterList parameters() const {
    if (!config_.two_stage) return layer_net_.parameters("net");
    auto out = disc_net_.parameters("disc_net");
    auto layer = layer_net_.parameters("layer_net");
    out.insert(out.end(), layer.begin(), layer.end());
    fusion_.collect("fusion", out);
    return out;
  }

  const ModelConfig& config() const { return config_; }
  Mgunet& disc_net() { return disc_net_; }
  Mgunet& layer_net() { return layer_net_; }
  Conv2d& fusion() { return fusion_; }

 private:
  ModelConfig config_;
  Mgunet disc_net_;
  Mgunet layer_net_;
  Conv2d fusion_;
};

struct LossReport {
  double l_seg1 = 0.0;
  double l_seg2 = 0.0;
  double total = 0.0;
  double dice1 = 0.0, ce1 = 0.0;
  double dice2 = 0.0, ce2 = 0.0;
  Tensor total_tensor;  // differentiable total
};

/// Joint objective. L_seg1 = dice + ce of the disc stage against the disc
/// projection of the truth; L_seg2 = dice + ce of the fused 11-class output;
/// total = L_seg1 + lambda * L_seg2. Without a disc stage (`disc_logits`
/// undefined) the total is L_seg2 alone.
inline LossReport total_loss(const Tensor& disc_logits, const Tensor& fused_probs,
                             const std::vector<LabelMap>& truth, double lambda) {
  for (std::size_t i = 0; i < truth.size(); ++i) {
    validate_labels(truth[i], "ground truth #" + std::to_string(i));
  }
  LossReport r;
  const auto fused_target = one_hot(truth, kNumClasses);
  const auto dice2 = dice_loss(fused_probs, fused_target);
  const auto ce2 = ce_loss(fused_probs, fused_target);
  const auto seg2 = add(dice2, ce2);
  r.dice2 = dice2.item();
  r.ce2 = ce2.item();
  r.l_seg2 = seg2.item();
  if (!disc_logits.defined()) {
    r.total_tensor = seg2;
    r.total = r.l_seg2;
    return r;
  }
  const auto disc_probs = softmax_channels(disc_logits);
  const auto disc_target =
      one_hot(truth, kDiscNetClasses, [](std::uint8_t v) { return ClassScheme::to_disc_stage(v); });
  const auto dice1 = dice_loss(disc_probs, disc_target);
  const auto ce1 = ce_loss(disc_probs, disc_target);
  const auto seg1 = add(dice1, ce1);
  r.dice1 = dice1.item();
  r.ce1 = ce1.item();
  r.l_seg1 = seg1.item();
  r.total_tensor = add(seg1, scalar_mul(seg2, lambda));
  r.total = r.total_tensor.item();
  return r;
}

inline LossReport total_loss(const PipelineOutput& out, const std::vector<LabelMap>& truth,
                             double lambda) {
  return total_loss(out.disc_logits, out.fused_probs, truth, lambda);
}

/// Per-pixel argmax of [N, C, H, W] probabilities (first maximum on ties).
inline std::vector<LabelMap> argmax_channels(const Tensor& probs) {
  const auto d = detail::dims4(probs, "argmax_channels");
  std::vector<LabelMap> maps;
  const auto v = probs.values();
  for (std::size_t n = 0; n < d.n; ++n) {
    LabelMap m(d.h, d.w);
    for (std::size_t i = 0; i < d.plane(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < d.c; ++c) {
        if (v[(n * d.c + c) * d.plane() + i] > v[(n * d.c + best) * d.plane() + i]) best = c;
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

/// Inference without graph recording.
inline LabelMap predict(const TwoStageModel& model, const Tensor& image) {
  NoGradGuard guard;
  return argmax_channels(model.forward(image).fused_probs).front();
}

// ---------------------------------------------------------------- model files

namespace detail {

inline TensorRecord meta_record(const std::string& key, std::vector<double> values) {
  return {"meta." + key, {values.size()}, std::move(values)};
}

inline double meta_scalar(const std::vector<TensorRecord>& records, const std::string& key,
                          const std::string& where) {
  const auto* r = find_record(records, "meta." + key);
  if (!r || r->values.empty()) throw ConfigError(where + ": checkpoint lacks meta." + key);
  return r->values[0];
}

}  // namespace detail

inline std::vector<TensorRecord> model_records(const TwoStageModel& model) {
  const auto& c = model.config();
  std::vector<TensorRecord> records{
      detail::meta_record("num_classes", {static_cast<double>(kNumClasses)}),
      detail::meta_record("two_stage", {c.two_stage ? 1.0 : 0.0}),
      detail::meta_record("grb", {c.grb ? 1.0 : 0.0}),
      detail::meta_record("msp", {c.msp ? 1.0 : 0.0}),
      detail::meta_record("base_channels", {static_cast<double>(c.base_channels)}),
      detail::meta_record("reduced_channels", {static_cast<double>(c.reduced_channels)}),
      detail::meta_record("nodes", {static_cast<double>(c.nodes[0]), static_cast<double>(c.nodes[1]),
                                    static_cast<double>(c.nodes[2]),
                                    static_cast<double>(c.nodes[3])}),
  };
  auto params = snapshot(model.parameters());
  records.insert(records.end(), params.begin(), params.end());
  return records;
}

inline ModelConfig model_config_from(const std::vector<TensorRecord>& records,
                                     const std::string& where) {
  const auto classes = detail::meta_scalar(records, "num_classes", where);
  if (classes != static_cast<double>(kNumClasses)) {
    throw ConfigError(where + ": checkpoint has " + std::to_string(static_cast<int>(classes)) +
                      " classes, expected " + std::to_string(kNumClasses));
  }
  ModelConfig c;
  c.two_stage = detail::meta_scalar(records, "two_stage", where) != 0.0;
  c.grb = detail::meta_scalar(records, "grb", where) != 0.0;
  c.msp = detail::meta_scalar(records, "msp", where) != 0.0;
  c.base_channels = static_cast<std::size_t>(detail::meta_scalar(records, "base_channels", where));
  c.reduced_channels =
      static_cast<std::size_t>(detail::meta_scalar(records, "reduced_channels", where));
  const auto* nodes = find_record(records, "meta.nodes");
  if (!nodes || nodes->values.size() != 4) throw ConfigError(where + ": checkpoint lacks meta.nodes");
  for (std::size_t i = 0; i < 4; ++i) c.nodes[i] = static_cast<std::size_t>(nodes->values[i]);
  return c;
}

inline void save_model(const std::filesystem::path& path, const TwoStageModel& model,
                       const std::vector<TensorRecord>& extra = {}) {
  auto records = model_records(model);
  records.insert(records.end(), extra.begin(), extra.end());
  write_checkpoint(path, records);
}

/// Rebuilds the architecture recorded in the checkpoint and restores weights.
inline TwoStageModel model_from_records(const std::vector<TensorRecord>& records,
                                        const std::string& where) {
  Rng rng(0);
  TwoStageModel model(model_config_from(records, where), rng);
  restore(model.parameters(), records);
  return model;
}

inline TwoStageModel load_model(const std::filesystem::path& path) {
  return model_from_records(read_checkpoint(path), path.string());
}

}  // namespace mgu
