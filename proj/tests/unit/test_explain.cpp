#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sdah/explain.hpp"
#include "sdah/io.hpp"
#include "sdah/ops.hpp"
#include "test_util.hpp"

using namespace sdah;

namespace {

const SdapcParams<double>& block_params(const Model<double>& m, int b) {
  return b < kStages ? m.encoder[b] : m.decoder[kBlockCount - 1 - b];
}

Model<double> micro(std::uint64_t seed = 3) {
  ModelConfig c;
  c.seed = seed;
  return build_model<double>(c);
}

SdmsaTrace<double> run_trace(const SdmsaParams<double>& p, const WindowLayout& l, bool deform,
                             std::uint64_t seed) {
  SdmsaTrace<double> t;
  sdmsa(test::rand_t({p.channels, l.height, l.width}, seed, -1, 1, false), p, l, deform, &t);
  return t;
}

SdmsaParams<double> attn_params(int c, int heads, int ws, std::uint64_t seed = 1) {
  ParamRegistry<double> reg(seed);
  SdapcSpec spec;
  spec.channels = c;
  spec.heads = heads;
  spec.window = ws;
  return *make_sdapc(reg, "b", spec).sdmsa;
}

void fill(Tensor<double> t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- heatmap

TEST(Heatmap, UniformAttentionIsConstant) {
  auto p = attn_params(8, 2, 4);
  fill(p.w_q, 0);
  fill(p.bias_table, 0);
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 2), false, 2);
  const auto mass = attention_mass(t), heat = attention_heatmap(t);
  for (double v : mass.data()) EXPECT_NEAR(v, 2.0, 1e-12);  // P * (1/P) per head
  for (double v : heat.data()) EXPECT_EQ(v, 1.0);
}

TEST(Heatmap, ZeroOffsetsGiveAttentionColumnSums) {
  for (int shift : {0, 2}) {
    auto p = attn_params(8, 2, 4, 5);
    const auto l = WindowLayout::make(8, 8, 4, shift);
    const auto t = run_trace(p, l, false, 6);
    std::vector<double> expect(64, 0.0);
    const int np = l.points();
    for (int j = 0; j < 2; ++j)
      for (int n = 0; n < l.count(); ++n)
        for (int k = 0; k < np; ++k) {
          double s = 0;
          for (int q = 0; q < np; ++q) s += t.attention[((j * l.count() + n) * np + q) * np + k];
          const auto g = l.global_coord(n, k);
          expect[g[0] * 8 + g[1]] += s;
        }
    const auto mass = attention_mass(t);
    for (int i = 0; i < 64; ++i) EXPECT_NEAR(mass.data()[i], expect[i], 1e-12);
  }
}

TEST(Heatmap, NormalizedRangeAndTotalMass) {
  auto p = attn_params(8, 2, 4, 7);
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 0), true, 8);
  const auto h = attention_heatmap(t);
  auto v = h.data();
  EXPECT_EQ(*std::min_element(v.begin(), v.end()), 0.0);
  EXPECT_EQ(*std::max_element(v.begin(), v.end()), 1.0);
  // Bilinear splatting conserves mass: heads * N_w * P in total.
  double total = 0;
  const auto mass = attention_mass(t);
  for (double x : mass.data()) total += x;
  EXPECT_NEAR(total, 2.0 * 4 * 16, 1e-9);
  const auto peak = attention_mass(t, HeatmapReduction::peak);
  for (double x : peak.data()) EXPECT_GE(x, 0.0);
}

TEST(Heatmap, RejectsEmptyTrace) {
  EXPECT_THROW(attention_heatmap(SdmsaTrace<double>{}), DataError);
  EXPECT_THROW(deformation_points_csv("b", SdmsaTrace<double>{}), DataError);
}

// ---------------------------------------------------------------- points

TEST(Points, ZeroOffsetNetsGiveReferencePoints) {
  auto p = attn_params(8, 2, 4, 9);
  for (auto& net : p.offset_nets) {
    fill(net.pw_weight, 0);
    fill(net.pw_bias, 0);
  }
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 2), true, 10);
  const auto rows = lines(deformation_points_csv("blk", t));
  ASSERT_EQ(rows.size(), 1u + 4 * 2 * 16);
  EXPECT_EQ(rows[0], "block,window,head,ref_y,ref_x,def_y,def_x");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::istringstream is(rows[i]);
    std::string f[7];
    for (auto& s : f) std::getline(is, s, ',');
    EXPECT_EQ(f[0], "blk");
    EXPECT_EQ(f[3], f[5]) << rows[i];
    EXPECT_EQ(f[4], f[6]) << rows[i];
  }
}

TEST(Points, StrideKeepsEveryNthPoint) {
  auto p = attn_params(8, 2, 4, 11);
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 0), true, 12);
  EXPECT_EQ(lines(deformation_points_csv("b", t, 4)).size(), 1u + 4 * 2 * 4);
  EXPECT_THROW(deformation_points_csv("b", t, 0), DataError);
}

TEST(Points, ForwardReplayIsBitExact) {
  auto m = micro();
  const auto img = test::rand_t({1, 32, 32}, 13, 0, 1, false);
  ForwardOptions<double> opt;
  opt.trace = true;
  const auto a = forward(m, img, opt);
  const auto b = forward(m, img, opt);
  for (int k = 0; k < kBlockCount; ++k) {
    const auto& rec = a.blocks[k];
    ASSERT_TRUE(rec.trace.has_value());
    const auto csv = deformation_points_csv(rec.name, *rec.trace);
    EXPECT_EQ(csv, deformation_points_csv(rec.name, *b.blocks[k].trace));
    // Replaying only the attention branch from its recorded input.
    const auto& bp = block_params(m, k);
    SdmsaTrace<double> replay;
    sdmsa(rec.sdmsa_input.detach(), *bp.sdmsa, rec.layout, bp.spec.deform, &replay);
    EXPECT_EQ(csv, deformation_points_csv(rec.name, replay)) << rec.name;
    // Parsed coordinates stay inside the feature map.
    for (std::size_t i = 0; i < rec.trace->points.size(); i += 2) {
      EXPECT_GE(rec.trace->points[i], 0.0);
      EXPECT_LE(rec.trace->points[i], rec.layout.height - 1.0);
      EXPECT_GE(rec.trace->points[i + 1], 0.0);
      EXPECT_LE(rec.trace->points[i + 1], rec.layout.width - 1.0);
    }
  }
}

TEST(Points, FloatTraceRoundTripsThroughText) {
  ModelConfig c;
  auto m = build_model<float>(c);
  ForwardOptions<float> opt;
  opt.trace = true;
  const auto f = forward(m, test::rand_f({1, 32, 32}, 14, 0, 1), opt);
  const auto& t = *f.blocks[0].trace;
  const auto rows = lines(deformation_points_csv("x", t));
  std::istringstream is(rows[1]);
  std::string s[7];
  for (auto& v : s) std::getline(is, v, ',');
  EXPECT_EQ(std::stof(s[5]), t.points[0]);
  EXPECT_EQ(std::stof(s[6]), t.points[1]);
}

// ---------------------------------------------------------------- field

TEST(Field, ZeroOffsetsAreMidGrey) {
  auto p = attn_params(8, 2, 4, 15);
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 0), false, 16);
  const auto ppm = deformation_field_ppm(t);
  const std::string header = "P6\n8 8\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 64 * 3);
  EXPECT_EQ(std::string(ppm.begin(), ppm.begin() + header.size()), header);
  for (std::size_t i = header.size(); i < ppm.size(); i += 3) {
    EXPECT_EQ(ppm[i], 128);
    EXPECT_EQ(ppm[i + 1], 128);
    EXPECT_EQ(ppm[i + 2], 0);
  }
}

TEST(Field, ConstantOffsetGivesConstantInteriorColour) {
  auto p = attn_params(8, 2, 4, 17);
  for (auto& net : p.offset_nets) {
    fill(net.pw_weight, 0);
    fill(net.pw_bias, 0.3);
  }
  const auto t = run_trace(p, WindowLayout::make(8, 8, 4, 0), true, 18);
  const auto ppm = deformation_field_ppm(t);
  const std::size_t off = std::string("P6\n8 8\n255\n").size();
  // The last row and column are clamped back inside the map.
  const auto ref = std::vector<std::uint8_t>(ppm.begin() + off, ppm.begin() + off + 3);
  EXPECT_GT(ref[0], 128);
  EXPECT_EQ(ref[0], ref[1]);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(ppm[off + (y * 8 + x) * 3 + c], ref[c]);
  EXPECT_EQ(ppm, deformation_field_ppm(t));
}

// ---------------------------------------------------------------- grad-cam

TEST(GradCam, ChannelWeightsMatchFiniteDifferences) {
  auto m = micro(21);
  const auto img = test::rand_t({1, 32, 32}, 22, 0, 1, false);
  std::vector<std::uint8_t> roi(32 * 32, 0);
  for (int y = 8; y < 24; ++y)
    for (int x = 4; x < 20; ++x) roi[y * 32 + x] = 1;
  for (int block : {0, 3, 6}) {
    const auto cam = seg_grad_cam(m, img, 1, block, roi);
    const int c = cam.features.dim(0);
    const double hw = cam.features.dim(1) * cam.features.dim(2);
    ASSERT_EQ(static_cast<int>(cam.channel_weights.size()), c);
    const double eps = 1e-5;
    for (int ch = 0; ch < c; ch += std::max(1, c / 8)) {
      auto score = [&](double delta) {
        ForwardOptions<double> o;
        o.block_hook = [&](int b, const Tensor<double>& out) {
          if (b != block) return out;
          std::vector<double> bump(out.numel(), 0.0);
          std::fill_n(bump.begin() + ch * static_cast<std::size_t>(hw), static_cast<std::size_t>(hw), delta);
          return add(out, Tensor<double>(out.shape(), bump));
        };
        return grad_cam_score(m, img, 1, roi, o);
      };
      const double fd = (score(eps) - score(-eps)) / (2 * eps * hw);
      EXPECT_NEAR(cam.channel_weights[ch], fd, 1e-3 * std::max(1.0, std::abs(fd))) << block << " ch " << ch;
    }
    auto v = cam.map.data();
    EXPECT_EQ(cam.map.shape(), (Shape{32, 32}));
    for (double x : v) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(GradCam, ConstantModelGivesZeroMap) {
  auto m = micro(23);
  for (auto& [_, t] : m.params) fill(t, 0);
  const std::vector<std::uint8_t> roi(32 * 32, 1);
  const auto cam = seg_grad_cam(m, test::rand_t({1, 32, 32}, 24, 0, 1, false), 1, 2, roi);
  for (double v : cam.map.data()) EXPECT_EQ(v, 0.0);
  for (double w : cam.channel_weights) EXPECT_EQ(w, 0.0);
}

TEST(GradCam, LeavesParameterGradientsClear) {
  auto m = micro(25);
  const std::vector<std::uint8_t> roi(32 * 32, 1);
  seg_grad_cam(m, test::rand_t({1, 32, 32}, 26, 0, 1, false), 0, 1, roi);
  for (const auto& [name, t] : m.params)
    for (double g : t.grad()) ASSERT_EQ(g, 0.0) << name;
}

TEST(GradCam, RoiValidation) {
  auto m = micro();
  const auto img = test::rand_t({1, 32, 32}, 27, 0, 1, false);
  EXPECT_THROW(seg_grad_cam(m, img, 1, 0, std::vector<std::uint8_t>(32 * 32, 0)), DataError);
  EXPECT_THROW(seg_grad_cam(m, img, 1, 0, std::vector<std::uint8_t>(10, 1)), DataError);
  EXPECT_THROW(seg_grad_cam(m, img, 5, 0, std::vector<std::uint8_t>(32 * 32, 1)), DataError);
  EXPECT_THROW(seg_grad_cam(m, img, 1, 7, std::vector<std::uint8_t>(32 * 32, 1)), DataError);
}

// ---------------------------------------------------------------- images

TEST(Resize, HalfPixelBilinear) {
  const Tensor<double> m({2, 2}, std::vector<double>{0, 1, 2, 3});
  const auto r = resize_bilinear(m, 4, 4);
  const std::vector<double> row0{0, 0.25, 0.75, 1};
  for (int x = 0; x < 4; ++x) EXPECT_DOUBLE_EQ(r.data()[x], row0[x]);
  EXPECT_DOUBLE_EQ(r.data()[4 + 1], 0.75);
  EXPECT_DOUBLE_EQ(r.data()[15], 3.0);
  EXPECT_EQ(test::max_abs_diff(resize_bilinear(m, 2, 2), m), 0.0);
  EXPECT_THROW(resize_bilinear(Tensor<double>(Shape{1, 2, 2}), 4, 4), ShapeError);
}

TEST(Images, PgmBytes) {
  const auto pgm = map_pgm(Tensor<double>({2, 3}, std::vector<double>{0, 0.5, 1, 0.2, 1.5, -1}));
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 6);
  EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + header.size()), header);
  EXPECT_EQ(std::vector<std::uint8_t>(pgm.begin() + header.size(), pgm.end()),
            (std::vector<std::uint8_t>{0, 128, 255, 51, 255, 0}));
  const auto lab = label_pgm(LabelMap{1, 3, {0, 1, 2}}, 3);
  EXPECT_EQ(std::vector<std::uint8_t>(lab.end() - 3, lab.end()), (std::vector<std::uint8_t>{0, 128, 255}));
}

// ---------------------------------------------------------------- export

TEST(Export, LayoutAndByteStability) {
  auto m = micro(31);
  const auto img = test::rand_t({1, 32, 32}, 32, 0, 1, false);
  ExplainRequest req;
  req.case_name = "c7";
  const auto d1 = test::scratch("explain_a"), d2 = test::scratch("explain_b");
  const auto f1 = write_explain(d1, m, img, req);
  const auto f2 = write_explain(d2, m, img, req);
  ASSERT_EQ(f1.size(), 7u * 5);
  EXPECT_EQ(f1[0], d1 / "c7" / "stage0.enc" / "attn.pgm");
  EXPECT_EQ(f1[4], d1 / "c7" / "stage0.enc" / "gradcam.pgm");
  EXPECT_EQ(f1.back(), d1 / "c7" / "stage0.dec" / "gradcam.pgm");
  for (std::size_t i = 0; i < f1.size(); ++i) {
    EXPECT_EQ(std::filesystem::relative(f1[i], d1), std::filesystem::relative(f2[i], d2));
    const auto a = test::read_file(f1[i]);
    EXPECT_FALSE(a.empty()) << f1[i];
    EXPECT_EQ(a, test::read_file(f2[i])) << f1[i];
  }
  // The saved mass decodes to the in-memory reduction.
  ForwardOptions<double> opt;
  opt.trace = true;
  const auto fwd = forward(m, img, opt);
  const auto blob = load_sdt(d1 / "c7" / "stage1.enc" / "attn.sdt");
  const auto mass = attention_mass(*fwd.blocks[1].trace);
  EXPECT_EQ(blob.shape, mass.shape());
  const auto csv = test::read_file(d1 / "c7" / "stage1.enc" / "points.csv");
  EXPECT_EQ(std::string(csv.begin(), csv.end()), deformation_points_csv("stage1.enc", *fwd.blocks[1].trace));
}

TEST(Export, ConvOnlyWritesGradCamOnly) {
  ModelConfig c;
  c.branch_mode = BranchMode::conv_only;
  auto m = build_model<double>(c);
  ExplainRequest req;
  req.blocks = {2};
  const auto d = test::scratch("explain_conv");
  const auto files = write_explain(d, m, test::rand_t({1, 32, 32}, 33, 0, 1, false), req);
  ASSERT_EQ(files.size(), 1u);
  EXPECT_EQ(files[0], d / "case" / "stage2.enc" / "gradcam.pgm");
  req.blocks = {9};
  EXPECT_THROW(write_explain(d, m, test::rand_t({1, 32, 32}, 33, 0, 1, false), req), DataError);
}
