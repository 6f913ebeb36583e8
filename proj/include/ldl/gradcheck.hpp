#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ldl/autodiff.hpp"

namespace ldl {

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-6;
  /// Denominator floor: rel = |analytic - numeric| / max(|numeric|, floor).
  double floor = 1e-3;
  /// Parameters with more elements than this are checked on a random subset of this size (0 = check everything).
  std::size_t sample_above = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Set when a non-finite value stopped the check.
  std::string numerical_failure;
};

/// Central finite-difference check of every parameter in `store` against the
/// reverse-mode gradient of the scalar returned by `loss_fn`. 64-bit only.
///
/// Elements that fail at `eps` are re-measured at eps/10 and the smaller error
/// kept, so a ReLU or max-pool kink crossed by the probe does not mask a
/// correct gradient. A wrong gradient fails at both step sizes.
inline GradCheckReport grad_check(ParameterStore<double>& store,
                                  const std::function<Var(Graph<double>&)>& loss_fn,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  auto evaluate = [&]() {
    Graph<double> g(&store);
    Var loss = loss_fn(g);
    return g.value(loss)[0];
  };

  std::vector<std::vector<double>> analytic;
  try {
    store.zero_grad();
    Graph<double> g(&store);
    Var loss = loss_fn(g);
    g.backward(loss);
    for (std::size_t p = 0; p < store.size(); ++p) {
      const auto& grad = store[p].grad;
      if (!grad.all_finite()) {
        report.passed = false;
        report.numerical_failure = "non-finite analytic gradient for parameter '" + store[p].name + "'";
        return report;
      }
      analytic.emplace_back(grad.vec());
    }
  } catch (const NumericalError& e) {
    report.passed = false;
    report.numerical_failure = e.what();
    return report;
  }

  std::mt19937_64 rng(opt.seed);
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& param = store[p];
    std::vector<std::size_t> indices(param.value.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (opt.sample_above > 0 && indices.size() > opt.sample_above) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(opt.sample_above);
      std::sort(indices.begin(), indices.end());
    }
    for (auto i : indices) {
      const double original = param.value[i];
      auto numeric_at = [&](double eps) {
        param.value[i] = original + eps;
        const double up = evaluate();
        param.value[i] = original - eps;
        const double down = evaluate();
        param.value[i] = original;
        return (up - down) / (2 * eps);
      };
      const double a = analytic[p][i];
      double numeric = 0;
      double rel = 0;
      try {
        numeric = numeric_at(opt.eps);
        rel = std::abs(a - numeric) / std::max(std::abs(numeric), opt.floor);
        if (rel > opt.tol) {
          const double finer = numeric_at(opt.eps / 10);
          const double rel_finer = std::abs(a - finer) / std::max(std::abs(finer), opt.floor);
          if (rel_finer < rel) {
            rel = rel_finer;
            numeric = finer;
          }
        }
      } catch (const NumericalError& e) {
        param.value[i] = original;
        report.passed = false;
        report.numerical_failure = e.what();
        return report;
      }
      ++report.checked;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = param.name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

}  // namespace ldl
