#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sdah/inference.hpp"
#include "sdah/network.hpp"
#include "sdah/training.hpp"

namespace sdah {

/// Binary mask, row-major [H x W], nonzero = inside.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> on;

  bool at(int y, int x) const { return on[static_cast<std::size_t>(y) * width + x] != 0; }
  bool empty() const;
};

Mask class_mask(const LabelMap& label, int cls);

/// 2|A∩B| / (|A| + |B|); 1 when both masks are empty.
double dsc(const Mask& a, const Mask& b);

/// Mask pixels with a background 4-neighbour or on the image edge, as (y, x).
std::vector<std::array<int, 2>> boundary_points(const Mask& m);

/// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// max(P95(d(∂A→∂B)), P95(d(∂B→∂A))) with exact Euclidean distances scaled by
/// (spacing_y, spacing_x). nullopt when either mask is empty.
std::optional<double> hd95(const Mask& a, const Mask& b, std::array<double, 2> spacing = {1.0, 1.0});
/// Symmetric boundary Hausdorff distance (the P100 analogue of hd95).
std::optional<double> hausdorff(const Mask& a, const Mask& b,
                                std::array<double, 2> spacing = {1.0, 1.0});

struct TTestResult {
  double t = 0;
  double p = 0;
  int dof = 0;
  double mean_diff = 0;
};

/// Paired two-sided Student t-test on a - b. Throws DataError for n < 2 or
/// zero variance of the differences.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Student-t CDF via the regularized incomplete beta function.
double student_t_cdf(double t, double dof);
/// I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double x, double a, double b);

struct EvalRow {
  std::string case_name;
  int cls = 0;
  double dsc = 0;
  std::optional<double> hd95;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<double> class_mean_dsc;   // index = class, [0] unused
  std::vector<std::optional<double>> class_mean_hd95;
  double mean_dsc = 0;                  // over foreground classes
  std::optional<double> mean_hd95;
  int hd95_excluded = 0;                // rows with an undefined hd95
};

/// Per-case, per-foreground-class metrics from predicted and reference labels.
EvalReport evaluate_labels(const std::vector<std::string>& names,
                           const std::vector<LabelMap>& predicted,
                           const std::vector<LabelMap>& reference, int classes);
/// Sliding-window predictions of `model` scored against the dataset labels.
template <typename T>
EvalReport evaluate(const Model<T>& model, const std::vector<SegSample>& data,
                    const std::vector<std::string>& names, const SlidingConfig& cfg);

/// "case,class,dsc,hd95" rows, then per-class "mean" rows and a final
/// "mean,avg" row; undefined hd95 prints as "undefined".
std::string eval_csv(const EvalReport& report);

}  // namespace sdah
