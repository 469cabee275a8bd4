#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mgunet/gradcheck_suite.hpp"
#include "mgunet/trainer.hpp"
#include "oracles.hpp"

using namespace mgu;
using namespace mgu::oracle;

namespace {

// Smallest phantom geometry the layer stack fits in.
std::vector<LabeledSample> small_phantoms(std::size_t n, std::uint64_t seed = 1) {
  PhantomSpec spec;
  spec.height = 112;
  spec.width = 128;
  spec.seed = seed;
  return gen_phantom(spec, n);
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.lr0 = 3e-3;
  c.seed = 11;
  return c;
}

std::vector<TensorRecord> weights(const TwoStageModel& m) { return snapshot(m.parameters()); }

}  // namespace

TEST(Adam, FirstStepMovesByLearningRateAgainstTheGradient) {
  auto w = Tensor::from_values({4}, {0.5, -0.5, 2.0, 0.0}, true);
  const ParameterList params{{"w", w}};
  const auto r = Tensor::from_values({4}, {3.0, -0.01, 1e3, -2.0});
  backward(reduce_sum(mul(w, r)));
  OptimState s;
  s.config.weight_decay = 0.0;
  adam_step(s, params, 0.01);
  const std::vector<double> start{0.5, -0.5, 2.0, 0.0};
  for (std::size_t i = 0; i < 4; ++i) {
    const double g = r.value(i);
    EXPECT_NEAR(w.value(i), start[i] - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
  }
}

TEST(Adam, MatchesClosedFormOverSeveralSteps) {
  auto w = Tensor::from_values({2}, {1.0, -3.0}, true);
  const ParameterList params{{"w", w}};
  OptimState s;
  double theta[2] = {1.0, -3.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double lr = 0.05, wd = 1e-4;
  for (int t = 1; t <= 5; ++t) {
    w.zero_grad();
    backward(reduce_sum(mul(w, w)));  // g = 2 theta
    adam_step(s, params, lr);
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * theta[i] + wd * theta[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      theta[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w.value(i), theta[i], 1e-14) << "step " << t;
    }
  }
  EXPECT_EQ(s.step, 5u);
}

TEST(Adam, WeightDecayAloneShrinksParameters) {
  auto w = Tensor::from_values({3}, {0.8, -0.4, 0.1}, true);
  const ParameterList params{{"w", w}};
  backward(scalar_mul(reduce_sum(w), 0.0));
  OptimState s;
  adam_step(s, params, 1e-3);
  EXPECT_LT(w.value(0), 0.8);
  EXPECT_GT(w.value(1), -0.4);
  EXPECT_LT(w.value(2), 0.1);
}

TEST(Adam, MissingGradientIsContractError) {
  auto a = Tensor::from_values({1}, {1.0}, true);
  auto b = Tensor::from_values({1}, {1.0}, true);
  backward(reduce_sum(a));
  OptimState s;
  EXPECT_THROW(adam_step(s, {{"a", a}, {"b", b}}, 1e-3), ContractError);
  EXPECT_EQ(s.step, 0u);
  EXPECT_NO_THROW(adam_step(s, {{"a", a}, {"b", b, false}}, 1e-3));
}

TEST(Schedule, StepDecayEveryTwentyEpochs) {
  const TrainConfig c;
  for (std::size_t e = 0; e < 50; ++e) {
    const double expected = e < 20 ? 1e-3 : e < 40 ? 1e-4 : 1e-5;
    EXPECT_NEAR(lr_at(e, c), expected, 1e-18) << e;
  }
  EXPECT_EQ(lr_at(19, c), 1e-3);
  EXPECT_NEAR(lr_at(20, c), 1e-4, 1e-19);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, LossFallsAndFilesAppear) {
  const auto data = small_phantoms(3);
  Rng rng(2);
  TwoStageModel model(suite::miniature_model_config(), rng);
  auto cfg = quick_config(4);
  cfg.augment = false;
  const auto dir = scratch_dir("train_smoke");
  const auto result = train(model, {data[0], data[1]}, {data[2]}, cfg, {dir, {}, {}});
  ASSERT_EQ(result.log.size(), 4u);
  EXPECT_LT(result.log.back().total, result.log.front().total);
  for (const auto& e : result.log) EXPECT_EQ(e.step_losses.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  std::ifstream log(dir / "train_log.tsv");
  std::string line;
  std::size_t rows = 0;
  std::getline(log, line);
  EXPECT_EQ(line + "\n", kTrainLogHeader);
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4u);
  const auto best = load_model(dir / "best.ckpt");
  EXPECT_NEAR(evaluate(best, {data[2]}).mean_dice(), result.best_val_dice, 1e-15);
}

TEST(Training, FixedSeedIsBitwiseReproducible) {
  const auto data = small_phantoms(3);
  auto run = [&] {
    Rng rng(2);
    TwoStageModel model(suite::miniature_model_config(), rng);
    auto r = train(model, {data[0], data[1]}, {data[2]}, quick_config(2));
    return std::pair{r, weights(model)};
  };
  const auto [a, wa] = run();
  const auto [b, wb] = run();
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(a.log[e].step_losses, b.log[e].step_losses);
  EXPECT_EQ(wa, wb);
}

TEST(Training, ResumeReplaysTheUninterruptedRun) {
  const auto data = small_phantoms(3);
  const std::vector<LabeledSample> tr{data[0], data[1]}, va{data[2]};
  Rng r1(2);
  TwoStageModel straight(suite::miniature_model_config(), r1);
  const auto full = train(straight, tr, va, quick_config(3));

  const auto dir = scratch_dir("train_resume");
  Rng r2(2);
  TwoStageModel first(suite::miniature_model_config(), r2);
  train(first, tr, va, quick_config(1), {dir, {}, {}});
  Rng r3(99);  // different init, fully overwritten by the checkpoint
  TwoStageModel resumed(suite::miniature_model_config(), r3);
  const auto rest = train(resumed, tr, va, quick_config(3), {dir / "resumed", dir / "last.ckpt", {}});

  ASSERT_EQ(rest.log.size(), 3u);
  for (std::size_t e = 1; e < 3; ++e) EXPECT_EQ(rest.log[e].step_losses, full.log[e].step_losses);
  EXPECT_EQ(rest.log[0].total, full.log[0].total);
  EXPECT_EQ(weights(resumed), weights(straight));
}

TEST(Training, NonFiniteLossNamesTheOp) {
  const auto data = small_phantoms(1);
  Rng rng(2);
  TwoStageModel model(suite::miniature_model_config(), rng);
  // the fusion head feeds the softmax directly, so nothing downstream masks it
  model.fusion().bias().mutable_values()[3] = std::numeric_limits<double>::infinity();
  OptimState s;
  try {
    train_step(model, s, data[0], 2.0, 1e-3);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("s000_0"), std::string::npos) << what;
    EXPECT_NE(what.find("conv2d"), std::string::npos) << what;
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(Training, ZeroLambdaLeavesTheLayerStageWithoutSignal) {
  const auto data = small_phantoms(1);
  Rng rng(2);
  TwoStageModel model(suite::miniature_model_config(), rng);
  backward(total_loss(model.forward(image_tensor(data[0])), {data[0].label}, 0.0).total_tensor);
  std::size_t disc_nonzero = 0;
  for (const auto& p : model.parameters()) {
    const auto g = p.tensor.grad();
    const bool any = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    if (p.name.rfind("disc_net.", 0) == 0) disc_nonzero += any;
    else EXPECT_FALSE(any) << p.name;
  }
  EXPECT_GT(disc_nonzero, 0u);
}

TEST(Training, RejectsUnsuitableInputs) {
  const auto data = small_phantoms(2);
  Rng rng(2);
  TwoStageModel model(suite::miniature_model_config(), rng);
  EXPECT_THROW(train(model, {}, {data[1]}, quick_config(1)), ConfigError);
  auto odd = data[0];
  odd.height = 56;
  odd.image.resize(56 * 128);
  odd.label = LabelMap(56, 128);
  EXPECT_THROW(train(model, {data[0]}, {odd}, quick_config(1)), DimensionError);
}

TEST(Training, PoisonedEarlyWeightIsStillReported) {
  const auto data = small_phantoms(1);
  Rng rng(2);
  TwoStageModel model(suite::miniature_model_config(), rng);
  auto w = model.parameters().front().tensor;
  w.mutable_values()[0] = std::numeric_limits<double>::infinity();
  OptimState s;
  EXPECT_THROW(train_step(model, s, data[0], 2.0, 1e-3), NumericalError);
}
