#include "sdah/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdah/rng.hpp"

namespace sdah {

namespace {

double project(const Tensor<double>& y, const std::vector<double>& weights) {
  auto v = y.data();
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
  return s;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           std::vector<Tensor<double>> wrt, const GradCheckOptions& options) {
  GradCheckReport report;
  SplitMix64 rng(options.seed);

  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> y = fn();
  std::vector<double> weights(y.numel());
  for (double& w : weights) w = rng.uniform(-1.0, 1.0);
  y.backward(std::span<const double>(weights));

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto& t = wrt[k];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> entries(t.numel());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_input > 0 && entries.size() > options.max_entries_per_input) {
      for (std::size_t i = 0; i < options.max_entries_per_input; ++i)
        std::swap(entries[i], entries[i + rng.below(entries.size() - i)]);
      entries.resize(options.max_entries_per_input);
      std::sort(entries.begin(), entries.end());
    }
    auto data = t.mutable_data();
    for (std::size_t idx : entries) {
      const double original = data[idx];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        data[idx] = original + options.step;
        plus = project(fn(), weights);
        data[idx] = original - options.step;
        minus = project(fn(), weights);
        data[idx] = original;
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double abs_err = std::abs(analytic[idx] - numeric);
      const double denom =
          std::max({std::abs(analytic[idx]), std::abs(numeric), options.rel_floor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = "input#" + std::to_string(k) + "[" + std::to_string(idx) + "]";
      }
      ++report.entries_checked;
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace sdah
