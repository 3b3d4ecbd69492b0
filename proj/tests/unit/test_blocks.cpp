#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "sdah/blocks.hpp"
#include "sdah/grad_check.hpp"
#include "sdah/ops.hpp"
#include "test_util.hpp"

using namespace sdah;
using test::rand_t;

namespace {

struct Built {
  SdapcParams<double> p;
  std::vector<std::pair<std::string, Tensor<double>>> params;
};

Built build(int c, int heads, int ws, BranchMode mode = BranchMode::dual, Fusion fusion = Fusion::concat,
            bool deform = true, std::uint64_t seed = 1) {
  ParamRegistry<double> reg(seed);
  SdapcSpec spec;
  spec.channels = c;
  spec.heads = heads;
  spec.window = ws;
  spec.branch = mode;
  spec.fusion = fusion;
  spec.deform = deform;
  Built b{make_sdapc(reg, "blk", spec), {}};
  b.params = reg.release();
  return b;
}

void zero_all(std::vector<std::pair<std::string, Tensor<double>>>& params) {
  for (auto& [_, t] : params)
    for (auto& v : t.mutable_data()) v = 0;
}

std::set<std::string> names(const Built& b) {
  std::set<std::string> s;
  for (const auto& [n, _] : b.params) s.insert(n);
  return s;
}

}  // namespace

TEST(Division1, ZeroWeightsAreResidualOnly) {
  auto b = build(8, 2, 4);
  zero_all(b.params);
  auto x = rand_t({8, 4, 4}, 2, -1, 1, false);
  EXPECT_EQ(test::max_abs_diff(sdapc_division1(x, b.p), x), 0.0);
}

TEST(Division1, ZeroInputZeroBiasesGiveZero) {
  auto b = build(8, 2, 4);
  auto y = sdapc_division1(Tensor<double>(Shape{8, 4, 4}), b.p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Division1, Gradients) {
  auto b = build(8, 2, 4);
  auto x = rand_t({8, 4, 4}, 3);
  std::vector<Tensor<double>> wrt{x, b.p.dw1.weight, b.p.fc1.weight, b.p.fc2.weight, b.p.ln1.gamma};
  const auto r = grad_check([=] { return sdapc_division1(x, b.p); }, wrt);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
}

TEST(Division2, ZeroWeightsAreResidualOnly) {
  for (auto mode : {BranchMode::dual, BranchMode::sdmsa_only, BranchMode::conv_only}) {
    auto b = build(8, 2, 4, mode);
    zero_all(b.params);
    auto x = rand_t({8, 8, 8}, 4, -1, 1, false);
    auto y = sdapc_division2(x, b.p, WindowLayout::make(8, 8, 4, 2));
    EXPECT_EQ(test::max_abs_diff(y, x), 0.0);
  }
}

TEST(Division2, ShapePreservedInAllModes) {
  for (auto mode : {BranchMode::dual, BranchMode::sdmsa_only, BranchMode::conv_only})
    for (auto fusion : {Fusion::concat, Fusion::sum}) {
      auto b = build(8, 2, 4, mode, fusion);
      auto x = rand_t({8, 8, 4}, 5, -1, 1, false);
      EXPECT_EQ(sdapc_block(x, b.p, WindowLayout::make(8, 4, 4, 0)).shape(), x.shape());
    }
}

TEST(Division2, ConvOnlyEqualsDualWithSilencedAttention) {
  const int c = 8;
  auto dual = build(c, 2, 4, BranchMode::dual);
  auto conv = build(c, 2, 4, BranchMode::conv_only);
  for (auto& v : dual.p.sdmsa->w_o.mutable_data()) v = 0;
  // conv_only's fc_out takes the conv half of the dual fc_out rows.
  auto dw = dual.p.fc_out.weight.data();
  auto cw = conv.p.fc_out.weight.mutable_data();
  std::copy(dw.begin() + c * c, dw.end(), cw.begin());
  auto x = rand_t({c, 8, 8}, 6, -1, 1, false);
  const auto l = WindowLayout::make(8, 8, 4, 2);
  EXPECT_LT(test::max_abs_diff(sdapc_division2(x, dual.p, l), sdapc_division2(x, conv.p, l)), 1e-12);
}

TEST(Division2, FcOutWidth) {
  EXPECT_EQ(build(8, 2, 4, BranchMode::dual).p.fc_out.weight.dim(0), 16);
  EXPECT_EQ(build(8, 2, 4, BranchMode::dual, Fusion::sum).p.fc_out.weight.dim(0), 8);
  EXPECT_EQ(build(8, 2, 4, BranchMode::sdmsa_only).p.fc_out.weight.dim(0), 8);
  EXPECT_EQ(build(8, 2, 4, BranchMode::conv_only).p.fc_out.weight.dim(0), 8);
  EXPECT_EQ(build(8, 2, 4).p.dw1.weight.dim(-1), 7);
  EXPECT_EQ(build(8, 2, 4).p.dw2->weight.dim(-1), 7);
}

TEST(Block, AllZeroParametersGiveIdentity) {
  auto b = build(8, 2, 4);
  zero_all(b.params);
  auto x = rand_t({8, 8, 8}, 7, -1, 1, false);
  EXPECT_EQ(test::max_abs_diff(sdapc_block(x, b.p, WindowLayout::make(8, 8, 4, 2)), x), 0.0);
}

TEST(Block, FullGradientCheckAtDeskShape) {
  auto b = build(8, 2, 4);
  // Generic offsets so the deformable path is exercised away from lattice points.
  SplitMix64 rng(8);
  for (auto& net : b.p.sdmsa->offset_nets)
    for (auto& v : net.pw_weight.mutable_data()) v = rng.uniform(-2, 2);
  for (auto& v : b.p.sdmsa->bias_table.mutable_data()) v = rng.uniform(-1, 1);
  auto x = rand_t({8, 8, 8}, 9);
  const auto l = WindowLayout::make(8, 8, 4, 2);
  std::vector<Tensor<double>> wrt{x};
  for (const auto& [_, t] : b.params) wrt.push_back(t);
  GradCheckOptions opt;
  opt.tolerance = 1e-4;
  opt.max_entries_per_input = 24;
  opt.seed = 3;
  const auto r = grad_check([=] { return sdapc_block(x, b.p, l); }, wrt, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst;
}

TEST(Block, DualContainsBothSingleBranchParameterSets) {
  const auto dual = names(build(8, 2, 4, BranchMode::dual));
  const auto attn = names(build(8, 2, 4, BranchMode::sdmsa_only));
  const auto conv = names(build(8, 2, 4, BranchMode::conv_only));
  EXPECT_TRUE(std::includes(dual.begin(), dual.end(), attn.begin(), attn.end()));
  EXPECT_TRUE(std::includes(dual.begin(), dual.end(), conv.begin(), conv.end()));
  EXPECT_GT(dual.size(), attn.size());
  EXPECT_GT(dual.size(), conv.size());
  EXPECT_FALSE(attn.count("blk.dw2.weight"));
  EXPECT_FALSE(conv.count("blk.sdmsa.w_q"));
}

// ---------------------------------------------------------------- stems

TEST(Stem, EmbedGeometry) {
  ParamRegistry<float> reg(1);
  auto p = make_conv_embed(reg, "e", 1, 8);
  EXPECT_EQ(conv_embed(test::rand_f({1, 32, 32}, 2), p).shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(conv_embed(test::rand_f({1, 224, 224}, 3), p).shape(), (Shape{8, 56, 56}));
  EXPECT_THROW(conv_embed(test::rand_f({1, 30, 32}, 4), p), ShapeError);
  const std::array<int, 4> strides{2, 1, 2, 1};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(p.convs[i].stride, strides[i]);
  EXPECT_EQ(p.convs[0].weight.shape(), (Shape{4, 1, 3, 3}));
  EXPECT_EQ(p.convs[3].weight.shape(), (Shape{8, 8, 3, 3}));
}

TEST(Stem, EmbedZeroInputGivesZero) {
  ParamRegistry<double> reg(1);
  auto p = make_conv_embed(reg, "e", 2, 8);
  const auto y = conv_embed(Tensor<double>(Shape{2, 16, 16}), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Stem, ExpandGeometryAndAdjoint) {
  ParamRegistry<double> reg(2);
  auto head = make_deconv_expand(reg, "h", 8, 3);
  auto x = rand_t({8, 8, 8}, 5, -1, 1, false);
  auto y = deconv_expand(x, head);
  EXPECT_EQ(y.shape(), (Shape{3, 32, 32}));
  // <deconv(x), g> = <x, conv_s4(g)> with the same (bias-free) kernel.
  auto g = rand_t(y.shape(), 6, -1, 1, false);
  auto y0 = deconv2d(x, head.weight, Tensor<double>(), 4, 0);
  auto cg = conv2d(g, head.weight, Tensor<double>(), {4, 0, 1});
  double l = 0, r = 0;
  for (std::size_t i = 0; i < g.numel(); ++i) l += y0.data()[i] * g.data()[i];
  for (std::size_t i = 0; i < x.numel(); ++i) r += x.data()[i] * cg.data()[i];
  EXPECT_NEAR(l, r, 1e-9);
}

TEST(Stem, ResamplingGeometry) {
  ParamRegistry<double> reg(3);
  auto down = make_downsample(reg, "d", 16, 32);
  auto up = make_upsample(reg, "u", 32, 16);
  auto fuse = make_skip_fuse(reg, "f", 16);
  auto x = rand_t({16, 8, 8}, 7, -1, 1, false);
  auto d = downsample(x, down);
  EXPECT_EQ(d.shape(), (Shape{32, 4, 4}));
  auto u = upsample(d, up);
  EXPECT_EQ(u.shape(), x.shape());
  EXPECT_EQ(skip_fuse(u, x, fuse).shape(), (Shape{16, 8, 8}));
  EXPECT_THROW(skip_fuse(d, x, fuse), ShapeError);
  EXPECT_THROW(downsample(rand_t({16, 7, 8}, 8, -1, 1, false), down), ShapeError);
}

TEST(Stem, ParseNames) {
  EXPECT_EQ(parse_branch_mode("sdmsa_only"), BranchMode::sdmsa_only);
  EXPECT_EQ(to_string(parse_fusion("sum")), "sum");
  EXPECT_THROW(parse_branch_mode("both"), DataError);
  EXPECT_THROW(parse_fusion("avg"), DataError);
}
