#include <gtest/gtest.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>

#include "sdah/metrics.hpp"
#include "../common/oracles.hpp"
#include "test_util.hpp"

using namespace sdah;

namespace {

Mask random_mask(int h, int w, double density, SplitMix64& rng) {
  Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w)};
  for (auto& v : m.on) v = rng.uniform() < density;
  return m;
}

Mask from_points(int h, int w, std::vector<std::array<int, 2>> pts) {
  Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (auto [y, x] : pts) m.on[y * w + x] = 1;
  return m;
}

}  // namespace

TEST(Dsc, BasicCases) {
  const auto a = from_points(4, 4, {{0, 0}, {1, 1}});
  EXPECT_EQ(dsc(a, a), 1.0);
  EXPECT_EQ(dsc(a, from_points(4, 4, {{2, 2}})), 0.0);
  EXPECT_EQ(dsc(a, from_points(4, 4, {{0, 0}, {3, 3}})), 0.5);
  EXPECT_EQ(dsc(from_points(4, 4, {}), from_points(4, 4, {})), 1.0);
  EXPECT_THROW(dsc(a, from_points(4, 5, {})), ShapeError);
}

TEST(Hd95, BasicCases) {
  const auto a = from_points(8, 8, {{0, 0}});
  const auto b = from_points(8, 8, {{3, 4}});
  EXPECT_DOUBLE_EQ(*hd95(a, b), 5.0);
  EXPECT_DOUBLE_EQ(*hd95(b, b), 0.0);
  EXPECT_DOUBLE_EQ(*hd95(a, b, {2.0, 1.0}), std::hypot(6.0, 4.0));
  EXPECT_FALSE(hd95(a, from_points(8, 8, {})).has_value());
  EXPECT_FALSE(hd95(from_points(8, 8, {}), from_points(8, 8, {})).has_value());
  EXPECT_THROW(hd95(a, b, {0.0, 1.0}), DataError);
}

TEST(Boundary, FourConnectivityAndImageEdge) {
  Mask m{5, 5, std::vector<std::uint8_t>(25, 1)};
  const auto all = boundary_points(m);
  EXPECT_EQ(all.size(), 16u);  // image edge ring only
  Mask block{5, 5, std::vector<std::uint8_t>(25, 0)};
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) block.on[y * 5 + x] = 1;
  const auto b = boundary_points(block);
  EXPECT_EQ(b.size(), 8u);
  EXPECT_EQ(std::count(b.begin(), b.end(), std::array<int, 2>{2, 2}), 0);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 95), 9.5);
  EXPECT_DOUBLE_EQ(percentile({7}, 95), 7.0);
  EXPECT_DOUBLE_EQ(percentile({5, 1, 3}, 100), 5.0);
  EXPECT_THROW(percentile({}, 50), DataError);
}

TEST(Metrics, MatchBruteForceOnRandomMasks) {
  SplitMix64 rng(2024);
  for (int t = 0; t < 100; ++t) {
    const double da = rng.uniform(0.05, 0.7), db = rng.uniform(0.05, 0.7);
    Mask a = random_mask(16, 16, da, rng), b = random_mask(16, 16, db, rng);
    if (a.empty() || b.empty()) continue;
    EXPECT_EQ(dsc(a, b), oracle::dsc(a, b));
    EXPECT_EQ(dsc(a, b), dsc(b, a));
    EXPECT_EQ(boundary_points(a), oracle::boundary(a));
    const std::array<double, 2> sp{rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
    EXPECT_NEAR(*hd95(a, b), oracle::hd(a, b, 95), 1e-9);
    EXPECT_NEAR(*hd95(a, b, sp), oracle::hd(a, b, 95, sp), 1e-9);
    EXPECT_NEAR(*hausdorff(a, b), oracle::hd(a, b, 100), 1e-9);
    EXPECT_EQ(*hd95(a, b), *hd95(b, a));
    EXPECT_LE(*hd95(a, b), *hausdorff(a, b) + 1e-12);
    EXPECT_EQ(dsc(a, a), 1.0);
    EXPECT_EQ(*hd95(a, a), 0.0);
  }
}

TEST(Metrics, SparseShapesMatchBruteForce) {
  SplitMix64 rng(7);
  for (int t = 0; t < 40; ++t) {
    Mask a = random_mask(16, 16, 0.02, rng), b = random_mask(16, 16, 0.02, rng);
    if (a.empty() || b.empty()) continue;
    EXPECT_NEAR(*hd95(a, b), oracle::hd(a, b, 95), 1e-9);
  }
}

// ---------------------------------------------------------------- t-test

TEST(TTest, ReferenceVector) {
  const std::vector<double> a{0.912, 0.884, 0.951, 0.873, 0.902, 0.935, 0.889, 0.921, 0.944, 0.899};
  const std::vector<double> b{0.897, 0.879, 0.933, 0.881, 0.885, 0.915, 0.872, 0.910, 0.930, 0.894};
  const auto r = paired_t_test(a, b);
  // 50-digit reference evaluation of the same statistic.
  EXPECT_NEAR(r.t, 4.214840989723251211, 1e-9);
  EXPECT_NEAR(r.p, 0.0022565926895427469153, 1e-12);
  EXPECT_NEAR(r.mean_diff, 0.0114, 1e-14);
  EXPECT_EQ(r.dof, 9);
}

TEST(TTest, DegenerateAndSign) {
  const std::vector<double> a{1, 2, 3};
  EXPECT_THROW(paired_t_test(a, a), DataError);
  EXPECT_THROW(paired_t_test({1.0}, {2.0}), DataError);
  EXPECT_THROW(paired_t_test({1.0, 2.0}, {1.0}), DataError);
  const auto up = paired_t_test({1.0, 2.2, 3.1, 4.3}, {0.5, 1.0, 2.9, 3.0});
  EXPECT_GT(up.t, 0);
  const auto down = paired_t_test({0.5, 1.0, 2.9, 3.0}, {1.0, 2.2, 3.1, 4.3});
  EXPECT_LT(down.t, 0);
  EXPECT_NEAR(up.p, down.p, 1e-15);
  EXPECT_GT(up.p, 0.0);
  EXPECT_LE(up.p, 1.0);
}

TEST(TTest, StudentCdfReferenceValues) {
  struct Case {
    double t, dof, cdf;
  };
  for (const auto& c : {Case{0.5, 3, 0.67427601757592450278}, Case{-1.7, 7, 0.066464448391277631931},
                        Case{2.3, 15, 0.98188785130867423373}, Case{4.0, 2, 0.97140452079103168293},
                        Case{0.0, 5, 0.5}, Case{-3.2, 30, 0.0016193008559765675424}})
    EXPECT_NEAR(student_t_cdf(c.t, c.dof), c.cdf, 1e-13) << c.t << " " << c.dof;
}

TEST(TTest, StudentCdfAgreesWithBoost) {
  for (double dof : {1.0, 2.5, 4.0, 9.0, 29.0, 120.0}) {
    boost::math::students_t dist(dof);
    for (double t = -8; t <= 8; t += 0.37) EXPECT_NEAR(student_t_cdf(t, dof), boost::math::cdf(dist, t), 1e-12);
  }
}

TEST(TTest, IncompleteBetaReferenceValues) {
  EXPECT_NEAR(regularized_incomplete_beta(0.3, 2, 3), 0.34829999999999998042, 1e-14);
  EXPECT_NEAR(regularized_incomplete_beta(0.9, 0.5, 0.5), 0.79516723530086657191, 1e-13);
  EXPECT_NEAR(regularized_incomplete_beta(0.01, 5, 1.5), 2.6957276768685272617e-10, 1e-20);
  EXPECT_NEAR(regularized_incomplete_beta(0.75, 10, 20), 0.99999920523052096555, 1e-13);
  EXPECT_EQ(regularized_incomplete_beta(0.0, 2, 3), 0.0);
  EXPECT_EQ(regularized_incomplete_beta(1.0, 2, 3), 1.0);
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, ReportAndCsv) {
  LabelMap ref{4, 4, std::vector<std::uint8_t>(16, 0)};
  LabelMap pred = ref;
  ref.values[0] = ref.values[1] = 1;
  pred.values[0] = 1;
  pred.values[5] = 2;
  const auto rep = evaluate_labels({"c0"}, {pred}, {ref}, 3);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_NEAR(rep.rows[0].dsc, 2.0 / 3.0, 1e-15);
  // Distances from the reference boundary are {0, 1}: P95 interpolates to 0.95.
  EXPECT_DOUBLE_EQ(*rep.rows[0].hd95, 0.95);
  EXPECT_EQ(rep.rows[1].dsc, 0.0);
  EXPECT_FALSE(rep.rows[1].hd95.has_value());
  EXPECT_EQ(rep.hd95_excluded, 1);
  EXPECT_NEAR(rep.mean_dsc, 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(*rep.mean_hd95, 0.95);
  EXPECT_EQ(eval_csv(rep),
            "case,class,dsc,hd95\n"
            "c0,1,0.66666666666666663,0.94999999999999996\n"
            "c0,2,0,undefined\n"
            "mean,1,0.66666666666666663,0.94999999999999996\n"
            "mean,2,0,undefined\n"
            "mean,avg,0.33333333333333331,0.94999999999999996\n");
  EXPECT_THROW(evaluate_labels({"a", "b"}, {pred}, {ref}, 3), DataError);
}

TEST(Evaluate, ClassMask) {
  LabelMap l{1, 4, {0, 1, 2, 1}};
  EXPECT_EQ(class_mask(l, 1).on, (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_TRUE(class_mask(l, 3).empty());
}
