#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mgunet/graph_reasoning.hpp"
#include "oracles.hpp"

using namespace mgu;
using namespace mgu::oracle;

namespace {

void randomize(Tensor& t, Rng& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : t.mutable_values()) v = u(rng);
}

void randomize(Conv2d& c, Rng& rng) {
  randomize(c.weight(), rng);
  if (c.bias().defined()) randomize(c.bias(), rng);
}

GraphReasoningBlock random_block(std::size_t c, std::size_t r, std::size_t n, Rng& rng) {
  GraphReasoningBlock b(c, r, n, rng);
  randomize(b.reduce(), rng);
  randomize(b.node_projection(), rng);
  randomize(b.inverse_projection(), rng);
  randomize(b.adjacency(), rng);
  randomize(b.expand(), rng);
  return b;
}

// 1x1 convolution of one batch item as [out, P].
std::vector<double> pointwise(Conv2d& conv, const Tensor& x, std::size_t n) {
  const auto C = x.dim(1), P = x.dim(2) * x.dim(3), O = conv.out_channels();
  std::vector<double> out(O * P);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t p = 0; p < P; ++p) {
      double s = conv.bias().defined() ? conv.bias().value(o) : 0.0;
      for (std::size_t c = 0; c < C; ++c) s += conv.weight().value(o * C + c) * x.value((n * C + c) * P + p);
      out[o * P + p] = s;
    }
  return out;
}

// Straight loop transcription of the block.
std::vector<double> block_reference(GraphReasoningBlock& b, const Tensor& x) {
  const auto N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const auto R = b.reduced(), K = b.nodes();
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    const auto xr = pointwise(b.reduce(), x, n);
    const auto xa = pointwise(b.node_projection(), x, n);
    const auto xd = pointwise(b.inverse_projection(), x, n);
    std::vector<double> v(R * K, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < P; ++p) v[r * K + k] += xr[r * P + p] * xa[k * P + p];
    std::vector<double> vp(R * K, 0.0);  // V (I - A)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < K; ++j)
          vp[r * K + k] += v[r * K + j] * ((j == k ? 1.0 : 0.0) - b.adjacency().value(j * K + k));
    std::vector<double> z(R * K, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < R; ++j) s += b.state_weights().value(r * R + j) * vp[j * K + k];
        z[r * K + k] = std::max(0.0, s);
      }
    std::vector<double> y(R * P, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < K; ++k) y[r * P + p] += z[r * K + k] * xd[k * P + p];
    auto& e = b.expand();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        double s = e.bias().value(c);
        for (std::size_t r = 0; r < R; ++r) s += e.weight().value(c * R + r) * y[r * P + p];
        out[(n * C + c) * P + p] = s + x.value((n * C + c) * P + p);
      }
  }
  return out;
}

}  // namespace

TEST(GraphReasoning, ZeroExpansionIsBitwiseIdentity) {
  Rng rng(3);
  GraphReasoningBlock b(16, 8, 4, rng);
  const auto x = random_tensor({2, 16, 6, 7}, rng, false);
  const auto y = b.forward(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.value(i), x.value(i));
}

TEST(GraphReasoning, MatchesLoopReference) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto b = random_block(12, 6, 5, rng);
    const auto x = random_tensor({2, 12, 5, 9}, rng, false);
    const auto y = b.forward(x);
    const auto ref = block_reference(b, x);
    EXPECT_LT(max_abs_diff(y.values(), ref), 1e-10);
  }
}

TEST(GraphReasoning, TraceShapes) {
  Rng rng(5);
  GraphReasoningBlock b(64, 32, 16, rng);
  const auto x = random_tensor({1, 64, 16, 32}, rng, false);
  GrbTrace trace;
  const auto y = b.forward(x, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 64, 16, 32}));
  ASSERT_EQ(trace.node_features.size(), 1u);
  EXPECT_EQ(trace.node_features[0].shape(), (Shape{32, 16}));
  EXPECT_EQ(trace.graph_output[0].shape(), (Shape{32, 16}));
  EXPECT_EQ(trace.residual.shape(), (Shape{1, 64, 16, 32}));
}

TEST(GraphReasoning, NodeRelabellingLeavesOutputUnchanged) {
  Rng rng(17);
  auto b = random_block(10, 4, 5, rng);
  const auto x = random_tensor({1, 10, 6, 6}, rng, false);
  const auto before = b.forward(x);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto K = perm.size(), C = b.channels();
  auto permute_rows = [&](Conv2d& conv) {
    const std::vector<double> w(conv.weight().values().begin(), conv.weight().values().end());
    const std::vector<double> bias(conv.bias().values().begin(), conv.bias().values().end());
    auto wv = conv.weight().mutable_values();
    auto bv = conv.bias().mutable_values();
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t c = 0; c < C; ++c) wv[k * C + c] = w[perm[k] * C + c];
      bv[k] = bias[perm[k]];
    }
  };
  permute_rows(b.node_projection());
  permute_rows(b.inverse_projection());
  const std::vector<double> a(b.adjacency().values().begin(), b.adjacency().values().end());
  auto av = b.adjacency().mutable_values();
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) av[i * K + j] = a[perm[i] * K + perm[j]];
  const auto after = b.forward(x);
  EXPECT_LT(max_abs_diff(before.values(), after.values()), 1e-12);
}

TEST(GraphReasoning, EveryParameterReceivesGradient) {
  Rng rng(23);
  auto b = random_block(8, 4, 3, rng);
  auto x = random_tensor({1, 8, 5, 5}, rng);
  const auto r = random_tensor({1, 8, 5, 5}, rng, false);
  backward(reduce_sum(mul(b.forward(x), r)));
  ParameterList params;
  b.collect("grb", params);
  EXPECT_EQ(params.size(), 10u);
  for (const auto& p : params) {
    const auto g = p.tensor.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) << p.name;
  }
}

TEST(GraphReasoning, InvalidConfigurationsAreConfigErrors) {
  Rng rng(1);
  EXPECT_THROW(GraphReasoningBlock(8, 8, 4, rng), ConfigError);
  EXPECT_THROW(GraphReasoningBlock(8, 0, 4, rng), ConfigError);
  GraphReasoningBlock b(8, 4, 30, rng);
  EXPECT_THROW(b.forward(random_tensor({1, 8, 5, 5}, rng, false)), ConfigError);  // 30 nodes > 25 pixels
  GraphReasoningBlock c(8, 4, 3, rng);
  EXPECT_THROW(c.forward(random_tensor({1, 6, 5, 5}, rng, false)), ConfigError);
  c.adjacency() = Tensor::zeros({4, 4}, true);
  EXPECT_THROW(c.forward(random_tensor({1, 8, 5, 5}, rng, false)), ConfigError);
}

TEST(PoolPartition, PadsUpToTheKernelMultiple) {
  Rng rng(2);
  const auto x = random_tensor({1, 2, 16, 32}, rng, false);
  EXPECT_EQ(pool_partition(x, 1).shape(), (Shape{1, 2, 16, 32}));
  EXPECT_EQ(pool_partition(x, 2).shape(), (Shape{1, 2, 8, 16}));
  EXPECT_EQ(pool_partition(x, 3).shape(), (Shape{1, 2, 6, 11}));
  EXPECT_EQ(pool_partition(x, 5).shape(), (Shape{1, 2, 4, 7}));
}

TEST(PoolPartition, MatchesClampedWindowMean) {
  Rng rng(9);
  const auto x = random_tensor({2, 3, 7, 11}, rng, false);
  for (std::size_t k : {2u, 3u, 5u}) {
    const auto y = pool_partition(x, k);
    const auto H = x.dim(2), W = x.dim(3), HO = y.dim(2), WO = y.dim(3);
    std::vector<double> ref;
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t i = 0; i < HO; ++i)
        for (std::size_t j = 0; j < WO; ++j) {
          double s = 0.0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const auto yy = std::min(i * k + a, H - 1), xx = std::min(j * k + b, W - 1);
              s += x.value((p * H + yy) * W + xx);
            }
          ref.push_back(s / static_cast<double>(k * k));
        }
    EXPECT_LT(max_abs_diff(y.values(), ref), 1e-14) << k;
  }
}

TEST(Mgrm, BranchesConcatenateToFourTimesTheWidth) {
  Rng rng(4);
  MgrmConfig cfg{128, 64, {16, 16, 8, 4}, true, true};
  Mgrm m(cfg, rng);
  const auto x = random_tensor({1, 128, 16, 32}, rng, false);
  Tensor cat;
  const auto y = m.forward(x, &cat);
  EXPECT_EQ(cat.shape(), (Shape{1, 512, 16, 32}));
  EXPECT_EQ(y.shape(), (Shape{1, 128, 16, 32}));
}

TEST(Mgrm, ZeroExpansionMakesEachBranchItsPooledInput) {
  Rng rng(6);
  MgrmConfig cfg{8, 4, {4, 4, 3, 2}, true, true};
  Mgrm m(cfg, rng);
  const auto x = random_tensor({1, 8, 10, 10}, rng, false);
  Tensor cat;
  m.forward(x, &cat);
  std::vector<Tensor> expected{x};
  for (std::size_t b = 1; b < 4; ++b) {
    expected.push_back(bilinear_upsample(pool_partition(x, kBranchPooling[b]), 10, 10));
  }
  const auto ref = concat_channels(expected);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_EQ(cat.value(i), ref.value(i));
}

TEST(Mgrm, AblationsChangeTopology) {
  Rng rng(8);
  ParameterList full, no_msp, no_grb;
  Mgrm({8, 4, {4, 4, 3, 2}, true, true}, rng).collect("m", full);
  Mgrm({8, 4, {4, 4, 3, 2}, true, false}, rng).collect("m", no_msp);
  Mgrm({8, 4, {4, 4, 3, 2}, false, true}, rng).collect("m", no_grb);
  EXPECT_EQ(full.size(), 4 * 10u + 2);
  EXPECT_EQ(no_msp.size(), 10u);
  EXPECT_EQ(no_grb.size(), 2u);
  EXPECT_THROW(Mgrm({8, 4, {4, 4, 3, 2}, false, false}, rng), ConfigError);
  Mgrm small({8, 4, {4, 4, 3, 2}, true, true}, rng);
  EXPECT_THROW(small.forward(random_tensor({1, 8, 4, 8}, rng, false)), ConfigError);
}
