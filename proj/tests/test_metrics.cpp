#include <gtest/gtest.h>

#include <random>

#include "mgunet/metrics.hpp"
#include "oracles.hpp"

using namespace mgu;
using namespace mgu::oracle;

namespace {

LabelMap random_map(std::size_t h, std::size_t w, std::mt19937_64& rng, int classes = 11) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  LabelMap m(h, w);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(d(rng));
  return m;
}

// Predicted class 3 on [0, 40), true class 3 on [10, 70): |X| 40, |Y| 60, overlap 30.
std::pair<LabelMap, LabelMap> overlap_example() {
  LabelMap pred(1, 100), truth(1, 100);
  for (std::size_t i = 0; i < 40; ++i) pred.labels[i] = 3;
  for (std::size_t i = 10; i < 70; ++i) truth.labels[i] = 3;
  return {pred, truth};
}

}  // namespace

TEST(Metrics, WorkedOverlapExample) {
  const auto [pred, truth] = overlap_example();
  EXPECT_DOUBLE_EQ(dsc(pred, truth, 3), 0.6);
  EXPECT_DOUBLE_EQ(*pixel_accuracy(pred, truth, 3), 0.5);
}

TEST(Metrics, AbsentClassConventions) {
  const auto [pred, truth] = overlap_example();
  EXPECT_EQ(dsc(pred, truth, 7), 1.0);
  EXPECT_EQ(*pixel_accuracy(pred, truth, 7), 1.0);
  LabelMap t(1, 4), p(1, 4);
  p.labels = {5, 0, 0, 0};
  EXPECT_FALSE(pixel_accuracy(p, t, 5).has_value());
  EXPECT_EQ(dsc(p, t, 5), 0.0);
  EXPECT_THROW(dsc(p, LabelMap(2, 2), 0), DimensionError);
}

TEST(Metrics, MatchConfusionMatrixOracle) {
  std::mt19937_64 rng(10);
  std::vector<LabelMap> preds, truths;
  for (int i = 0; i < 100; ++i) {
    // bias toward agreement so overlaps are not tiny
    auto t = random_map(12, 17, rng);
    auto p = t;
    std::uniform_real_distribution<double> u(0, 1);
    std::uniform_int_distribution<int> d(0, 10);
    for (auto& v : p.labels)
      if (u(rng) < 0.4) v = static_cast<std::uint8_t>(d(rng));
    preds.push_back(p);
    truths.push_back(t);
  }
  const auto report = evaluate_maps(preds, truths);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::array<std::array<long, 11>, 11> cm{};  // [pred][truth]
    for (std::size_t k = 0; k < preds[i].size(); ++k) ++cm[preds[i].labels[k]][truths[i].labels[k]];
    for (std::size_t c = 0; c < 11; ++c) {
      long row = 0, col = 0;
      for (std::size_t j = 0; j < 11; ++j) {
        row += cm[c][j];
        col += cm[j][c];
      }
      const double d = row + col == 0 ? 1.0 : 2.0 * cm[c][c] / static_cast<double>(row + col);
      EXPECT_NEAR(report.sample_dsc[i][c], d, 1e-12);
      if (col > 0) EXPECT_NEAR(*report.sample_pa[i][c], cm[c][c] / static_cast<double>(col), 1e-12);
    }
  }
}

TEST(Metrics, DiceIsSymmetricPixelAccuracyIsNot) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto a = random_map(8, 8, rng, 4), b = random_map(8, 8, rng, 4);
    for (std::uint8_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(dsc(a, b, c), dsc(b, a, c));
  }
  const auto [pred, truth] = overlap_example();
  EXPECT_NE(*pixel_accuracy(pred, truth, 3), *pixel_accuracy(truth, pred, 3));  // 0.5 vs 0.75
}

TEST(Metrics, DiceEqualsBinaryF1) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto a = random_map(6, 9, rng, 3), b = random_map(6, 9, rng, 3);
    const auto c = region_counts(a, b, 1);
    if (c.overlap == 0) continue;
    const double precision = static_cast<double>(c.overlap) / static_cast<double>(c.predicted);
    const double recall = static_cast<double>(c.overlap) / static_cast<double>(c.truth);
    EXPECT_NEAR(dsc(a, b, 1), 2 * precision * recall / (precision + recall), 1e-14);
  }
}

TEST(Metrics, ReportAveragesAndSpread) {
  std::mt19937_64 rng(5);
  std::vector<LabelMap> preds, truths;
  for (int i = 0; i < 7; ++i) {
    preds.push_back(random_map(10, 10, rng));
    truths.push_back(random_map(10, 10, rng));
  }
  const auto r = evaluate_maps(preds, truths);
  double layer = 0.0;
  for (std::size_t c = 1; c <= 9; ++c) layer += r.dsc[c].mean;
  EXPECT_NEAR(r.group_dsc[1].mean, layer / 9.0, 1e-14);
  EXPECT_NEAR(r.mean_dice(), (layer + r.dsc[10].mean) / 10.0, 1e-14);
  EXPECT_DOUBLE_EQ(r.group_dsc[2].mean, r.dsc[10].mean);
  std::vector<double> d3;
  for (const auto& row : r.sample_dsc) d3.push_back(row[3]);
  double m = 0.0, ss = 0.0;
  for (double v : d3) m += v / 7.0;
  for (double v : d3) ss += (v - m) * (v - m);
  EXPECT_NEAR(r.dsc[3].std, std::sqrt(ss / 6.0), 1e-14);
  EXPECT_THROW(evaluate_maps(preds, {}), DimensionError);
}

TEST(Metrics, PerfectPredictionScoresOne) {
  std::mt19937_64 rng(6);
  std::vector<LabelMap> maps{random_map(9, 9, rng), random_map(9, 9, rng)};
  const auto r = evaluate_maps(maps, maps);
  for (std::size_t c = 0; c < 11; ++c) {
    EXPECT_EQ(r.dsc[c].mean, 1.0);
    EXPECT_EQ(r.pa[c].mean, 1.0);
  }
}

TEST(Metrics, RunSummaryUsesRunMeans) {
  const auto [pred, truth] = overlap_example();
  const auto a = evaluate_maps({pred}, {truth});
  const auto b = evaluate_maps({truth}, {truth});
  const auto s = summarize_runs({a, b});
  EXPECT_DOUBLE_EQ(s.dsc[3].mean, 0.8);
  EXPECT_NEAR(s.dsc[3].std, std::sqrt(0.08), 1e-15);
}

TEST(Stratification, CountsOutOfOrderColumns) {
  LabelMap truth(5, 3);
  truth.labels = {0, 0, 0,  //
                  1, 1, 10,
                  2, 2, 10,
                  3, 3, 3,
                  0, 0, 0};
  auto pred = truth;
  EXPECT_EQ(stratification_check({pred}, {truth}).violations, 0u);
  EXPECT_EQ(stratification_check({pred}, {truth}).columns, 2u);  // the disc column is skipped
  pred.at(3, 0) = 1;  // 1 below 2
  pred.at(1, 1) = 10;  // disc where the truth has none
  const auto r = stratification_check({pred}, {truth});
  EXPECT_EQ(r.violations, 2u);
  EXPECT_DOUBLE_EQ(r.rate(), 1.0);
}

TEST(Report, TsvAndTextLayout) {
  const auto [pred, truth] = overlap_example();
  const auto r = evaluate_maps({pred}, {truth});
  const auto dir = scratch_dir("report");
  write_report_tsv(dir / "r.tsv", r);
  std::ifstream is(dir / "r.tsv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "class\tdsc_mean\tdsc_std\tpa_mean\tpa_std");
  std::size_t rows = 0;
  while (std::getline(is, line) && line[0] != '#') ++rows;
  EXPECT_EQ(rows, 14u);
  EXPECT_NE(format_report(r).find("Average"), std::string::npos);
}
