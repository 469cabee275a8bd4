#pragma once

// Named gradcheck cases grouped by scope: every primitive op, the network
// blocks, and miniature full models.

#include <random>
#include <string>
#include <vector>

#include "mgunet/gradcheck.hpp"
#include "mgunet/graph_reasoning.hpp"
#include "mgunet/losses.hpp"
#include "mgunet/mgunet.hpp"
#include "mgunet/ops.hpp"
#include "mgunet/pipeline.hpp"

namespace mgu {

enum class GradScope { Op, Block, Model };

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "op") return GradScope::Op;
  if (s == "block") return GradScope::Block;
  if (s == "model") return GradScope::Model;
  throw ConfigError("unknown gradcheck scope '" + s + "' (op, block, model)");
}

struct GradCase {
  std::string name;
  Fragment fragment;
  std::vector<Tensor> wrt;
};

namespace suite {

inline Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_values(std::move(shape), std::move(v), grad);
}

/// Values with |x| in [0.1, 1] and random sign, away from the relu kink.
inline Tensor signed_away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

/// sum(y * r) for a fixed random r, so every output element matters.
inline Tensor weighted_sum(const Tensor& y, const Tensor& r) { return reduce_sum(mul(y, r)); }

inline GradCase unary(const std::string& name, Tensor x, std::function<Tensor(const Tensor&)> op,
                      Rng& rng) {
  auto probe = op(x.detach());
  auto r = uniform(probe.shape(), -1.0, 1.0, rng, false);
  return {name, [x, r, op] { return weighted_sum(op(x), r); }, {x}};
}

inline std::vector<LabelMap> random_labels(std::size_t n, std::size_t h, std::size_t w,
                                           std::size_t classes, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  std::vector<LabelMap> maps;
  for (std::size_t i = 0; i < n; ++i) {
    LabelMap m(h, w);
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(pick(rng));
    maps.push_back(std::move(m));
  }
  return maps;
}

/// Fills parameters that start at exactly zero (graph adjacency, expand
/// conv, norm shifts) with small random values so every path carries a
/// gradient.
inline void randomize_zero_parameters(const ParameterList& params, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto p : params) {
    const auto v = p.tensor.values();
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
      for (auto& x : p.tensor.mutable_values()) x = u(rng);
    }
  }
}

inline std::vector<GradCase> op_cases(Rng& rng) {
  std::vector<GradCase> cases;
  const Shape s{2, 3, 5, 6};
  cases.push_back(unary("relu", signed_away_from_zero(s, rng), [](const Tensor& x) { return relu(x); }, rng));
  cases.push_back(unary("log", uniform(s, 0.5, 2.0, rng), [](const Tensor& x) { return log(x); }, rng));
  cases.push_back(unary("scalar_mul", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return scalar_mul(x, -1.7); }, rng));
  cases.push_back(unary("add_scalar", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return add_scalar(x, 0.3); }, rng));
  {
    auto a = uniform(s, -1, 1, rng), b = uniform(s, -1, 1, rng);
    auto r = uniform(s, -1, 1, rng, false);
    cases.push_back({"add", [=] { return weighted_sum(add(a, b), r); }, {a, b}});
    cases.push_back({"sub", [=] { return weighted_sum(sub(a, b), r); }, {a, b}});
    cases.push_back({"mul", [=] { return weighted_sum(mul(a, b), r); }, {a, b}});
    // both operands are the same tensor: gradients must accumulate
    cases.push_back({"mul_shared_input", [=] { return weighted_sum(mul(a, a), r); }, {a}});
  }
  {
    auto x = uniform(s, -1, 1, rng);
    cases.push_back({"reduce_sum", [=] { return scalar_mul(reduce_sum(mul(x, x)), 0.5); }, {x}});
    cases.push_back({"reduce_mean", [=] { return reduce_mean(mul(x, x)); }, {x}});
  }
  cases.push_back(unary("reshape", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return reshape(x, {6, 30}); }, rng));
  cases.push_back(unary("transpose2d", uniform({4, 7}, -1, 1, rng),
                        [](const Tensor& x) { return transpose2d(x); }, rng));
  {
    auto a = uniform({2, 2, 3, 4}, -1, 1, rng), b = uniform({2, 3, 3, 4}, -1, 1, rng);
    auto r = uniform({2, 5, 3, 4}, -1, 1, rng, false);
    cases.push_back({"concat_channels", [=] { return weighted_sum(concat_channels({a, b}), r); }, {a, b}});
    auto r2 = uniform({4, 2, 3, 4}, -1, 1, rng, false);
    cases.push_back({"concat_batch", [=] { return weighted_sum(concat_batch({a, a}), r2); }, {a}});
  }
  cases.push_back(unary("slice_channels", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return slice_channels(x, 1, 2); }, rng));
  cases.push_back(unary("batch_item", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return batch_item(x, 1); }, rng));
  cases.push_back(unary("replicate_pad", uniform(s, -1, 1, rng),
                        [](const Tensor& x) { return replicate_pad(x, 2, 3); }, rng));
  {
    auto a = uniform({4, 5}, -1, 1, rng), b = uniform({5, 3}, -1, 1, rng);
    auto r = uniform({4, 3}, -1, 1, rng, false);
    cases.push_back({"matmul", [=] { return weighted_sum(matmul(a, b), r); }, {a, b}});
  }
  {
    auto x = uniform({2, 3, 6, 7}, -1, 1, rng);
    auto w3 = uniform({4, 3, 3, 3}, -1, 1, rng), b = uniform({4}, -1, 1, rng);
    auto w1 = uniform({4, 3, 1, 1}, -1, 1, rng);
    auto r3 = uniform({2, 4, 6, 7}, -1, 1, rng, false);
    auto rs = uniform({2, 4, 2, 3}, -1, 1, rng, false);
    cases.push_back({"conv2d_3x3", [=] { return weighted_sum(conv2d(x, w3, b, {1, 1}, {1, 1}), r3); }, {x, w3, b}});
    cases.push_back({"conv2d_1x1", [=] { return weighted_sum(conv2d(x, w1, b, {1, 1}, {0, 0}), r3); }, {x, w1, b}});
    cases.push_back({"conv2d_stride2", [=] { return weighted_sum(conv2d(x, w3, Tensor(), {2, 2}, {0, 0}), rs); }, {x, w3}});
  }
  cases.push_back(unary("max_pool2d", uniform({2, 3, 6, 8}, -1, 1, rng),
                        [](const Tensor& x) { return max_pool2d(x, {2, 2}); }, rng));
  cases.push_back(unary("max_pool2d_4x2", uniform({1, 2, 8, 6}, -1, 1, rng),
                        [](const Tensor& x) { return max_pool2d(x, {4, 2}); }, rng));
  cases.push_back(unary("avg_pool2d", uniform({2, 3, 6, 9}, -1, 1, rng),
                        [](const Tensor& x) { return avg_pool2d(x, {3, 3}); }, rng));
  cases.push_back(unary("bilinear_upsample", uniform({1, 2, 3, 4}, -1, 1, rng),
                        [](const Tensor& x) { return bilinear_upsample(x, 7, 9); }, rng));
  cases.push_back(unary("softmax_channels", uniform({2, 4, 3, 3}, -2, 2, rng),
                        [](const Tensor& x) { return softmax_channels(x); }, rng));
  {
    auto x = uniform({2, 3, 4, 5}, -1, 1, rng);
    auto scale = uniform({3}, 0.5, 1.5, rng), shift = uniform({3}, -0.5, 0.5, rng);
    auto r = uniform({2, 3, 4, 5}, -1, 1, rng, false);
    cases.push_back({"channel_norm", [=] { return weighted_sum(channel_norm(x, scale, shift), r); }, {x, scale, shift}});
  }
  {
    auto logits = uniform({2, 4, 3, 5}, -2, 2, rng);
    const auto target = one_hot(random_labels(2, 3, 5, 4, rng), 4);
    cases.push_back({"dice_loss", [=] { return dice_loss(softmax_channels(logits), target); }, {logits}});
    cases.push_back({"ce_loss", [=] { return ce_loss(softmax_channels(logits), target); }, {logits}});
  }
  {
    auto image = uniform({1, 1, 4, 6}, 0, 1, rng);
    auto logits = uniform({1, 2, 4, 6}, -2, 2, rng);
    auto r = uniform({1, 1, 4, 6}, -1, 1, rng, false);
    cases.push_back({"mask_apply", [=] { return weighted_sum(mask_apply(image, softmax_channels(logits)), r); }, {image, logits}});
  }
  cases.push_back(unary("pool_partition", uniform({1, 2, 7, 8}, -1, 1, rng),
                        [](const Tensor& x) { return pool_partition(x, 3); }, rng));
  return cases;
}

inline std::vector<GradCase> block_cases(Rng& rng) {
  std::vector<GradCase> cases;
  {
    auto block = std::make_shared<ConvBlock>(3, 4, rng);
    ParameterList params;
    block->collect("block", params);
    randomize_zero_parameters(params, rng);
    auto x = uniform({1, 3, 6, 7}, -1, 1, rng);
    auto r = uniform({1, 4, 6, 7}, -1, 1, rng, false);
    auto wrt = trainable_tensors(params);
    wrt.push_back(x);
    cases.push_back({"conv_block", [=] { return weighted_sum(block->forward(x), r); }, wrt});
  }
  {
    auto grb = std::make_shared<GraphReasoningBlock>(8, 4, 3, rng);
    ParameterList params;
    grb->collect("grb", params);
    randomize_zero_parameters(params, rng);
    auto x = uniform({1, 8, 4, 5}, -1, 1, rng);
    auto r = uniform({1, 8, 4, 5}, -1, 1, rng, false);
    auto wrt = trainable_tensors(params);
    wrt.push_back(x);
    cases.push_back({"graph_reasoning_block", [=] { return weighted_sum(grb->forward(x), r); }, wrt});
  }
  for (int variant = 0; variant < 3; ++variant) {
    MgrmConfig config{8, 4, {4, 3, 2, 1}, variant != 2, variant != 1};
    auto mgrm = std::make_shared<Mgrm>(config, rng);
    ParameterList params;
    mgrm->collect("mgrm", params);
    randomize_zero_parameters(params, rng);
    auto x = uniform({1, 8, 6, 7}, -1, 1, rng);
    auto r = uniform({1, 8, 6, 7}, -1, 1, rng, false);
    auto wrt = trainable_tensors(params);
    wrt.push_back(x);
    const char* names[] = {"mgrm", "mgrm_without_msp", "mgrm_without_grb"};
    cases.push_back({names[variant], [=] { return weighted_sum(mgrm->forward(x), r); }, wrt});
  }
  return cases;
}

/// Miniature sizes: base width 4 and node counts {8, 4, 2, 1}.
inline ModelConfig miniature_model_config(bool two_stage = true) {
  ModelConfig c;
  c.two_stage = two_stage;
  c.base_channels = 4;
  c.nodes = {8, 4, 2, 1};
  return c;
}

inline std::vector<GradCase> model_cases(Rng& rng) {
  std::vector<GradCase> cases;
  auto network_case = [&](const std::string& name, MgunetConfig config, std::size_t h,
                          std::size_t w) {
    auto net = std::make_shared<Mgunet>(config, rng);
    const auto params = net->parameters("net");
    randomize_zero_parameters(params, rng);
    auto image = uniform({1, 1, h, w}, 0, 1, rng, false);
    const auto target = one_hot(random_labels(1, h, w, config.num_classes, rng), config.num_classes);
    cases.push_back({name,
                     [=] {
                       const auto p = softmax_channels(net->forward(image).logits);
                       return add(dice_loss(p, target), ce_loss(p, target));
                     },
                     trainable_tensors(params)});
  };
  auto plain = miniature_model_config().layer_network();
  plain.mgrm_enabled = false;
  network_case("mgunet_plain_32x64", plain, 32, 64);
  network_case("mgunet_mgrm_40x80", miniature_model_config().layer_network(), 40, 80);

  auto model = std::make_shared<TwoStageModel>(miniature_model_config(), rng);
  const auto params = model->parameters();
  randomize_zero_parameters(params, rng);
  auto image = uniform({1, 1, 80, 80}, 0, 1, rng, false);
  const auto truth = random_labels(1, 80, 80, kNumClasses, rng);
  cases.push_back({"two_stage_total_loss_80x80",
                   [=] { return total_loss(model->forward(image), truth, 2.0).total_tensor; },
                   trainable_tensors(params)});
  return cases;
}

}  // namespace suite

inline std::vector<GradCase> gradcheck_cases(GradScope scope, Rng& rng) {
  switch (scope) {
    case GradScope::Op: return suite::op_cases(rng);
    case GradScope::Block: return suite::block_cases(rng);
    case GradScope::Model: return suite::model_cases(rng);
  }
  return {};
}

/// Default sampling and step per scope; `tol` overrides the scope default
/// when positive.
inline GradcheckOptions scope_options(GradScope scope, double tol = 0.0) {
  GradcheckOptions o;
  switch (scope) {
    case GradScope::Op: o.samples = 64; o.h = 1e-5; o.tol = 1e-6; break;
    case GradScope::Block: o.samples = 120; o.h = 1e-5; o.tol = 1e-4; break;
    case GradScope::Model: o.samples = 240; o.h = 1e-4; o.tol = 1e-4; break;
  }
  if (tol > 0.0) o.tol = tol;
  return o;
}

inline std::vector<GradcheckReport> run_gradcheck_suite(GradScope scope, double tol,
                                                        std::uint64_t seed) {
  Rng rng(seed);
  auto options = scope_options(scope, tol);
  options.seed = seed;
  std::vector<GradcheckReport> reports;
  for (auto& c : gradcheck_cases(scope, rng)) {
    reports.push_back(gradcheck(c.name, c.fragment, c.wrt, options));
  }
  return reports;
}

}  // namespace mgu
