#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdah/tensor.hpp"

namespace sdah {

struct GradCheckOptions {
  double step = 1e-6;        // central-difference step h
  double tolerance = 1e-5;   // on the relative error below
  double rel_floor = 1e-3;   // denominators never drop below this
  std::size_t max_entries_per_input = 0;  // 0 checks every entry
  std::uint64_t seed = 0;    // projection weights and entry subsampling
};

struct GradCheckReport {
  double max_abs_error = 0.0;
  /// max |analytic - numeric| / max(|analytic|, |numeric|, rel_floor)
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst;  // "input#i[flat]" of the worst entry
  bool passed = true;
};

/// Compares reverse-mode gradients of `fn` with respect to each tensor in
/// `wrt` against central differences (f(x+h) - f(x-h)) / 2h. The output of
/// `fn` is reduced to a scalar with fixed random weights, so any output shape
/// works. `fn` must read `wrt` through captured handles; entries are perturbed
/// in place and restored.
GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           std::vector<Tensor<double>> wrt, const GradCheckOptions& options = {});

}  // namespace sdah
