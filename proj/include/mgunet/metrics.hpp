#pragma once

// Per-class Dice score and pixel accuracy, and dataset-level reports.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mgunet/classes.hpp"
#include "mgunet/data.hpp"
#include "mgunet/errors.hpp"
#include "mgunet/pipeline.hpp"

namespace mgu {

struct RegionCounts {
  std::size_t predicted = 0;  // |X|
  std::size_t truth = 0;      // |Y|
  std::size_t overlap = 0;    // |X n Y|
};

inline RegionCounts region_counts(const LabelMap& pred, const LabelMap& truth, std::uint8_t cls) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size()) {
    throw DimensionError("prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " and truth " +
                         std::to_string(truth.height) + "x" + std::to_string(truth.width) +
                         " differ in size");
  }
  RegionCounts c;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool x = pred.labels[i] == cls;
    const bool y = truth.labels[i] == cls;
    c.predicted += x;
    c.truth += y;
    c.overlap += x && y;
  }
  return c;
}

/// 2|X n Y| / (|X| + |Y|); 1 when the class is absent from both maps.
inline double dsc(const LabelMap& pred, const LabelMap& truth, std::uint8_t cls) {
  const auto c = region_counts(pred, truth, cls);
  if (c.predicted + c.truth == 0) return 1.0;
  return 2.0 * static_cast<double>(c.overlap) / static_cast<double>(c.predicted + c.truth);
}

/// |X n Y| / |Y|. With |Y| = 0 the score is 1 if |X| = 0 as well, and
/// undefined (nullopt, excluded from averages) otherwise.
inline std::optional<double> pixel_accuracy(const LabelMap& pred, const LabelMap& truth,
                                            std::uint8_t cls) {
  const auto c = region_counts(pred, truth, cls);
  if (c.truth == 0) return c.predicted == 0 ? std::optional<double>(1.0) : std::nullopt;
  return static_cast<double>(c.overlap) / static_cast<double>(c.truth);
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Mean and sample standard deviation (0 for fewer than two values).
inline Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

/// Which classes an aggregate row averages.
struct ClassGroup {
  const char* name;
  std::uint8_t first;
  std::uint8_t last;
};
inline constexpr std::array<ClassGroup, 3> kReportGroups{
    ClassGroup{"Average", 1, 10}, ClassGroup{"Layer", 1, 9}, ClassGroup{"Disc", 10, 10}};

struct EvalReport {
  std::vector<std::array<double, kNumClasses>> sample_dsc;
  std::vector<std::array<std::optional<double>, kNumClasses>> sample_pa;
  std::array<Stat, kNumClasses> dsc{};
  std::array<Stat, kNumClasses> pa{};
  std::array<Stat, kReportGroups.size()> group_dsc{};  // Average, Layer, Disc
  std::array<Stat, kReportGroups.size()> group_pa{};

  /// Mean Dice over classes 1..10.
  double mean_dice() const { return group_dsc[0].mean; }
  double mean_pa() const { return group_pa[0].mean; }
};

namespace detail {

// Group mean = mean of the per-class means; group std = spread across
// samples of each sample's group average.
template <typename PerSample>
Stat group_stat(const std::array<Stat, kNumClasses>& classes, const ClassGroup& g,
                const std::vector<PerSample>& samples) {
  Stat s;
  std::size_t k = 0;
  for (std::size_t c = g.first; c <= g.last; ++c) {
    if (classes[c].count == 0) continue;
    s.mean += classes[c].mean;
    ++k;
  }
  s.mean = k ? s.mean / static_cast<double>(k) : 0.0;
  std::vector<double> per_sample;
  for (const auto& row : samples) {
    double sum = 0.0;
    std::size_t m = 0;
    for (std::size_t c = g.first; c <= g.last; ++c) {
      if constexpr (std::is_same_v<std::decay_t<decltype(row[c])>, double>) {
        sum += row[c];
        ++m;
      } else if (row[c]) {
        sum += *row[c];
        ++m;
      }
    }
    if (m) per_sample.push_back(sum / static_cast<double>(m));
  }
  s.std = summarize(per_sample).std;
  s.count = per_sample.size();
  return s;
}

}  // namespace detail

inline EvalReport evaluate_maps(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& truths) {
  if (preds.size() != truths.size()) {
    throw DimensionError("evaluate: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(truths.size()) + " ground truths");
  }
  EvalReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::array<double, kNumClasses> d{};
    std::array<std::optional<double>, kNumClasses> p{};
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto cls = static_cast<std::uint8_t>(c);
      d[c] = dsc(preds[i], truths[i], cls);
      p[c] = pixel_accuracy(preds[i], truths[i], cls);
    }
    r.sample_dsc.push_back(d);
    r.sample_pa.push_back(p);
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<double> dv, pv;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      dv.push_back(r.sample_dsc[i][c]);
      if (r.sample_pa[i][c]) pv.push_back(*r.sample_pa[i][c]);
    }
    r.dsc[c] = summarize(dv);
    r.pa[c] = summarize(pv);
  }
  for (std::size_t g = 0; g < kReportGroups.size(); ++g) {
    r.group_dsc[g] = detail::group_stat(r.dsc, kReportGroups[g], r.sample_dsc);
    r.group_pa[g] = detail::group_stat(r.pa, kReportGroups[g], r.sample_pa);
  }
  return r;
}

/// Argmax of the fused probabilities for every sample, scored against its
/// label map.
inline EvalReport evaluate(const TwoStageModel& model, const std::vector<LabeledSample>& samples) {
  if (samples.empty()) throw ConfigError("evaluate: empty dataset");
  std::vector<LabelMap> preds, truths;
  for (const auto& s : samples) {
    preds.push_back(predict(model, image_tensor(s)));
    truths.push_back(s.label);
  }
  return evaluate_maps(preds, truths);
}

/// Per-class mean +- std across independent runs, from each run's means.
struct RunSummary {
  std::array<Stat, kNumClasses> dsc{};
  std::array<Stat, kNumClasses> pa{};
  std::array<Stat, kReportGroups.size()> group_dsc{};
  std::array<Stat, kReportGroups.size()> group_pa{};
};

inline RunSummary summarize_runs(const std::vector<EvalReport>& runs) {
  RunSummary s;
  auto collect = [&](auto pick) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(pick(r));
    return summarize(v);
  };
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    s.dsc[c] = collect([c](const EvalReport& r) { return r.dsc[c].mean; });
    s.pa[c] = collect([c](const EvalReport& r) { return r.pa[c].mean; });
  }
  for (std::size_t g = 0; g < kReportGroups.size(); ++g) {
    s.group_dsc[g] = collect([g](const EvalReport& r) { return r.group_dsc[g].mean; });
    s.group_pa[g] = collect([g](const EvalReport& r) { return r.group_pa[g].mean; });
  }
  return s;
}

struct StratificationCheck {
  std::size_t columns = 0;     // columns without disc in the ground truth
  std::size_t violations = 0;  // of those, columns whose predicted layers are out of order
  double rate() const { return columns ? static_cast<double>(violations) / static_cast<double>(columns) : 0.0; }
};

/// Scans each non-disc column top to bottom; the column is out of order when
/// a layer label (1..9) follows a deeper one, or the prediction places disc
/// pixels in it.
inline StratificationCheck stratification_check(const std::vector<LabelMap>& preds,
                                                const std::vector<LabelMap>& truths) {
  if (preds.size() != truths.size()) throw DimensionError("stratification_check: count mismatch");
  StratificationCheck r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const auto& t = truths[i];
    if (p.height != t.height || p.width != t.width) {
      throw DimensionError("stratification_check: prediction and truth differ in size");
    }
    for (std::size_t x = 0; x < t.width; ++x) {
      bool disc = false;
      for (std::size_t y = 0; y < t.height && !disc; ++y) disc = t.at(y, x) == kDiscLabel;
      if (disc) continue;
      ++r.columns;
      std::uint8_t deepest = 0;
      bool bad = false;
      for (std::size_t y = 0; y < p.height && !bad; ++y) {
        const auto l = p.at(y, x);
        if (l == kDiscLabel) bad = true;
        else if (l != 0 && l < deepest) bad = true;
        else if (l != 0) deepest = l;
      }
      r.violations += bad;
    }
  }
  return r;
}

inline constexpr const char* kReportFooter =
    "# DSC is 1 for a class absent from both prediction and truth.\n"
    "# PA is 1 for a class absent from both; a class absent from the truth but predicted\n"
    "# is left out of the PA averages. +- is the standard deviation across samples.\n";

inline void write_report_tsv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(17);
  os << "class\tdsc_mean\tdsc_std\tpa_mean\tpa_std\n";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    os << kClassNames[c] << '\t' << r.dsc[c].mean << '\t' << r.dsc[c].std << '\t' << r.pa[c].mean
       << '\t' << r.pa[c].std << '\n';
  }
  for (std::size_t g = 0; g < kReportGroups.size(); ++g) {
    os << kReportGroups[g].name << '\t' << r.group_dsc[g].mean << '\t' << r.group_dsc[g].std
       << '\t' << r.group_pa[g].mean << '\t' << r.group_pa[g].std << '\n';
  }
  os << kReportFooter;
}

/// Aligned text table (percent, mean +- std).
inline std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-12s %16s %16s\n", "class", "Dice (%)", "PA (%)");
  os << buf;
  auto row = [&](const char* name, const Stat& d, const Stat& p) {
    std::snprintf(buf, sizeof buf, "%-12s %8.2f +- %5.2f %8.2f +- %5.2f\n", name, 100 * d.mean,
                  100 * d.std, 100 * p.mean, 100 * p.std);
    os << buf;
  };
  for (std::size_t c = 0; c < kNumClasses; ++c) row(kClassNames[c], r.dsc[c], r.pa[c]);
  for (std::size_t g = 0; g < kReportGroups.size(); ++g) {
    row(kReportGroups[g].name, r.group_dsc[g], r.group_pa[g]);
  }
  os << kReportFooter;
  return os.str();
}

}  // namespace mgu
