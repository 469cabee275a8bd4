#pragma once

// Central finite-difference checks of analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

struct GradcheckOptions {
  std::size_t samples = 64;  // coordinates to check; all of them when fewer exist
  double h = 1e-5;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a relu/max-pool kink
  bool passed = false;
};

/// |a - n| / max(1e-8, |a| + |n|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// A scalar-valued computation over leaves it closes over.
using Fragment = std::function<Tensor()>;

namespace detail {

struct Evaluation {
  double value;
  std::uint64_t kinks;
};

inline Evaluation evaluate_fragment(const Fragment& f, bool record) {
  auto& monitor = kink_monitor();
  const auto saved = monitor;
  monitor = KinkMonitor{};
  monitor.active = true;
  Tensor loss;
  try {
    if (record) {
      loss = f();
    } else {
      NoGradGuard no_grad;
      loss = f();
    }
  } catch (...) {
    monitor = saved;
    throw;
  }
  const Evaluation e{loss.item(), monitor.hash};
  monitor = saved;
  if (record) backward(loss);
  return e;
}

}  // namespace detail

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h
/// on up to `samples` coordinates drawn at random from `wrt`. A coordinate
/// whose perturbation changes any relu/max-pool activation pattern is
/// skipped and replaced by the next draw.
/// Throws DeterminismError if two unperturbed evaluations differ.
inline GradcheckReport gradcheck(const std::string& name, const Fragment& fragment,
                                 std::vector<Tensor> wrt, const GradcheckOptions& options) {
  if (wrt.empty()) throw ContractError("gradcheck '" + name + "': nothing to differentiate");
  for (auto& t : wrt) {
    if (!t.requires_grad()) throw ContractError("gradcheck '" + name + "': input without gradient");
    t.zero_grad();
  }
  const auto base = detail::evaluate_fragment(fragment, true);
  const auto again = detail::evaluate_fragment(fragment, false);
  if (again.value != base.value || again.kinks != base.kinks) {
    throw DeterminismError("gradcheck '" + name + "': two evaluations disagree");
  }

  struct Coord {
    std::size_t tensor, index;
  };
  std::vector<Coord> coords;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    for (std::size_t i = 0; i < wrt[t].numel(); ++i) coords.push_back({t, i});
  }
  Rng rng(options.seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) analytic.push_back(t.grad());

  GradcheckReport report;
  report.name = name;
  report.tol = options.tol;
  for (const auto& c : coords) {
    if (report.checked == options.samples) break;
    auto values = wrt[c.tensor].mutable_values();
    const double original = values[c.index];
    values[c.index] = original + options.h;
    const auto plus = detail::evaluate_fragment(fragment, false);
    values[c.index] = original - options.h;
    const auto minus = detail::evaluate_fragment(fragment, false);
    values[c.index] = original;
    if (plus.kinks != base.kinks || minus.kinks != base.kinks) {
      ++report.skipped;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * options.h);
    report.max_rel_err =
        std::max(report.max_rel_err, relative_error(analytic[c.tensor][c.index], numeric));
    ++report.checked;
  }
  for (auto& t : wrt) t.zero_grad();
  report.passed = report.checked > 0 && report.max_rel_err < options.tol;
  return report;
}

/// Trainable tensors of a parameter list.
inline std::vector<Tensor> trainable_tensors(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

inline std::string format_gradcheck(const GradcheckReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-4s %-28s max_rel_err=%.3e tol=%.0e checked=%zu skipped=%zu",
                r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_rel_err, r.tol, r.checked,
                r.skipped);
  return buf;
}

}  // namespace mgu
