#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mgunet/pipeline.hpp"
#include "oracles.hpp"

using namespace mgu;
using namespace mgu::oracle;

namespace {

// Balanced labelling: every class covers the same number of pixels.
LabelMap balanced(std::size_t classes, std::size_t per_class) {
  LabelMap m(classes, per_class);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < per_class; ++j) m.at(c, j) = static_cast<std::uint8_t>(c);
  return m;
}

Tensor uniform_probs(std::size_t classes, std::size_t h, std::size_t w) {
  return Tensor::full({1, classes, h, w}, 1.0 / static_cast<double>(classes));
}

}  // namespace

TEST(DiceLoss, PerfectPredictionIsZero) {
  const auto target = one_hot({balanced(4, 5)}, 4);
  EXPECT_LE(dice_loss(target, target).item(), 1e-6);
}

TEST(DiceLoss, UniformPredictionOnBalancedTruth) {
  for (std::size_t m : {2u, 4u, 11u}) {
    const auto target = one_hot({balanced(m, 6)}, m);
    const auto loss = dice_loss(uniform_probs(m, m, 6), target).item();
    EXPECT_NEAR(loss, 1.0 - 1.0 / static_cast<double>(m), 1e-6) << m;
  }
}

TEST(DiceLoss, DisjointPredictionIsOne) {
  auto shifted = balanced(3, 4);
  for (auto& v : shifted.labels) v = static_cast<std::uint8_t>((v + 1) % 3);
  const auto loss = dice_loss(one_hot({shifted}, 3), one_hot({balanced(3, 4)}, 3)).item();
  EXPECT_GE(loss, 1.0 - 1e-5);
  EXPECT_LE(loss, 1.0);
}

TEST(DiceLoss, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(dice_loss(uniform_probs(3, 2, 2), uniform_probs(2, 2, 2)), DimensionError);
}

TEST(CeLoss, PerfectPredictionIsZero) {
  const auto target = one_hot({balanced(4, 5)}, 4);
  EXPECT_LE(ce_loss(target, target).item(), 1e-10);
}

TEST(CeLoss, UniformElevenClassValue) {
  const auto target = one_hot({balanced(11, 3)}, 11);
  EXPECT_NEAR(ce_loss(uniform_probs(11, 11, 3), target).item(), std::log(11.0) / 11.0, 1e-9);
}

TEST(CeLoss, SinglePixel) {
  // mean over M = 2 channels of -g log p
  const auto p = Tensor::from_values({1, 2, 1, 1}, {0.2, 0.8});
  const auto g = Tensor::from_values({1, 2, 1, 1}, {0.0, 1.0});
  EXPECT_NEAR(ce_loss(p, g).item(), -std::log(0.8) / 2.0, 1e-15);
}

TEST(CeLoss, ZeroProbabilityIsFloored) {
  const auto p = Tensor::from_values({1, 2, 1, 1}, {1.0, 0.0});
  const auto g = Tensor::from_values({1, 2, 1, 1}, {0.0, 1.0});
  const double loss = ce_loss(p, g).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, -std::log(1e-12) / 2.0, 1e-9);
}

TEST(OneHot, ProjectsAndValidates) {
  LabelMap m(1, 3);
  m.labels = {0, 10, 4};
  const auto disc = one_hot({m}, 2, ClassScheme::to_disc_stage);
  EXPECT_EQ(std::vector<double>(disc.values().begin(), disc.values().end()),
            (std::vector<double>{1, 0, 1, 0, 1, 0}));
  EXPECT_THROW(one_hot({m}, 10), DataError);
}

TEST(TotalLoss, WeightedSumOfTheTwoStages) {
  Rng rng(3);
  LabelMap truth(4, 6);
  std::uniform_int_distribution<int> label(0, 10);
  for (auto& v : truth.labels) v = static_cast<std::uint8_t>(label(rng));
  const auto disc_logits = random_tensor({1, 2, 4, 6}, rng, false);
  const auto fused = softmax_channels(random_tensor({1, 11, 4, 6}, rng, false));

  // independent recomputation from the element-wise definitions
  auto seg = [](const std::vector<double>& p, const std::vector<int>& lab, std::size_t m) {
    const std::size_t P = lab.size();
    double dice = 0.0, ce = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      double inter = 0.0, ps = 0.0, gs = 0.0;
      for (std::size_t i = 0; i < P; ++i) {
        const double g = lab[i] == static_cast<int>(c) ? 1.0 : 0.0;
        inter += p[c * P + i] * g;
        ps += p[c * P + i];
        gs += g;
        if (g > 0) ce -= std::log(p[c * P + i]);
      }
      dice += (2 * inter + 1e-6) / (ps + gs + 1e-6);
    }
    return 1.0 - dice / static_cast<double>(m) + ce / static_cast<double>(m * P);
  };
  std::vector<int> lab(truth.labels.begin(), truth.labels.end()), disc_lab;
  for (int v : lab) disc_lab.push_back(v == 10 ? 1 : 0);
  const auto dp = softmax_reference(disc_logits);
  const double seg1 = seg(dp, disc_lab, 2);
  const double seg2 = seg({fused.values().begin(), fused.values().end()}, lab, 11);

  const auto r = total_loss(disc_logits, fused, {truth}, 2.0);
  EXPECT_NEAR(r.l_seg1, seg1, 1e-12);
  EXPECT_NEAR(r.l_seg2, seg2, 1e-12);
  EXPECT_NEAR(r.total, seg1 + 2.0 * seg2, 1e-12);
  EXPECT_NEAR(r.l_seg1, r.dice1 + r.ce1, 1e-15);
  EXPECT_NEAR(r.l_seg2, r.dice2 + r.ce2, 1e-15);

  const auto r0 = total_loss(disc_logits, fused, {truth}, 0.0);
  EXPECT_EQ(r0.total, r0.l_seg1);
  const auto one_stage = total_loss(Tensor(), fused, {truth}, 2.0);
  EXPECT_EQ(one_stage.total, one_stage.l_seg2);
}

TEST(TotalLoss, LambdaWeightsTheSecondStage) {
  // a perfect disc stage leaves total = lambda * L_seg2
  LabelMap truth(2, 2);
  truth.labels = {0, 10, 3, 3};
  const auto disc_probs = one_hot({truth}, 2, ClassScheme::to_disc_stage);
  const auto disc_logits = scalar_mul(disc_probs, 60.0);
  const auto fused = uniform_probs(11, 2, 2);
  const auto r = total_loss(disc_logits, fused, {truth}, 2.0);
  EXPECT_LT(r.l_seg1, 1e-6);
  EXPECT_NEAR(r.total, r.l_seg1 + 2.0 * r.l_seg2, 1e-12);
}

TEST(TotalLoss, OutOfRangeLabelIsDataError) {
  LabelMap truth(2, 2);
  truth.labels = {0, 1, 11, 2};
  try {
    total_loss(Tensor(), uniform_probs(11, 2, 2), {truth}, 2.0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("11"), std::string::npos);
  }
}
