#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <regex>
#include <set>

#include "sdah/config.hpp"
#include "sdah/flops.hpp"
#include "sdah/network.hpp"
#include "sdah/ops.hpp"
#include "sdah/training.hpp"
#include "../common/oracles.hpp"
#include "test_util.hpp"

using namespace sdah;

namespace {

std::uint64_t measured_flops(const ModelConfig& cfg, int h, int w) {
  auto m = build_model<float>(cfg);
  NoGradGuard ng;
  FlopScope scope;
  forward(m, Tensor<float>::full({cfg.in_channels, h, w}, 0.3f));
  return scope.count();
}

}  // namespace

TEST(Config, MicroDefaults) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  const std::array<int, 4> res{8, 4, 2, 1}, win{4, 4, 2, 1}, shift{0, 2, 0, 0};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(c.stage_resolution(i), res[i]);
    EXPECT_EQ(c.resolved_window(i), win[i]);
    EXPECT_EQ(c.stage_shift(i), shift[i]);
  }
}

TEST(Config, PaperPreset) {
  const auto c = paper_config(1, 4);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.image_size, 224);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(c.resolved_window(i), 7);
  EXPECT_EQ(c.stage_shift(1), 3);
  EXPECT_EQ(c.stage_resolution(0) * c.stage_resolution(0) / 49, 64);
}

TEST(Config, ValidationErrors) {
  auto bad = [](auto mutate) {
    ModelConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), DataError);
  };
  bad([](ModelConfig& c) { c.deform_flags = "DDD"; });
  bad([](ModelConfig& c) { c.deform_flags = "DDXD"; });
  bad([](ModelConfig& c) { c.num_heads[1] = 3; });
  bad([](ModelConfig& c) { c.window_sizes[0] = 3; });
  bad([](ModelConfig& c) { c.image_size = 48; });
  bad([](ModelConfig& c) { c.num_classes = 1; });
  bad([](ModelConfig& c) { c.stem_width = 16; });
  bad([](ModelConfig& c) { c.gamma_off = -1; });
}

TEST(Network, MicroForwardShape) {
  for (int k : {2, 4}) {
    ModelConfig c;
    c.num_classes = k;
    auto m = build_model<float>(c);
    auto r = forward(m, test::rand_f({1, 32, 32}, 1, 0, 1));
    EXPECT_EQ(r.logits.shape(), (Shape{k, 32, 32}));
    ASSERT_EQ(r.blocks.size(), 7u);
    EXPECT_EQ(r.blocks[3].name, "stage3.enc");
    EXPECT_EQ(r.blocks[4].name, "stage2.dec");
    EXPECT_EQ(r.blocks[6].output.shape(), (Shape{8, 8, 8}));
  }
}

TEST(Network, RejectsIndivisibleInput) {
  auto m = build_model<float>(ModelConfig{});
  EXPECT_THROW(forward(m, test::rand_f({1, 48, 32}, 1)), ShapeError);
  EXPECT_THROW(forward(m, test::rand_f({2, 32, 32}, 1)), ShapeError);
}

TEST(Network, SameSeedSameParameters) {
  auto a = build_model<float>(ModelConfig{});
  auto b = build_model<float>(ModelConfig{});
  ModelConfig other;
  other.seed = 1;
  auto c = build_model<float>(other);
  ASSERT_EQ(a.params.size(), b.params.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params[i].first, b.params[i].first);
    EXPECT_EQ(test::max_abs_diff(a.params[i].second, b.params[i].second), 0.0);
    differs = differs || test::max_abs_diff(a.params[i].second, c.params[i].second) > 0;
  }
  EXPECT_TRUE(differs);
}

TEST(Network, DeterministicAndBatchIndependent) {
  auto m = build_model<float>(ModelConfig{});
  auto x0 = test::rand_f({1, 32, 32}, 2, 0, 1), x1 = test::rand_f({1, 32, 32}, 3, 0, 1);
  auto a = predict_logits(m, x0), b = predict_logits(m, x0);
  EXPECT_EQ(test::max_abs_diff(a, b), 0.0);
  auto batch = forward_batch(m, {x0, x1});
  ASSERT_EQ(batch.size(), 2u);
  EXPECT_EQ(test::max_abs_diff(batch[0], a), 0.0);
  EXPECT_EQ(test::max_abs_diff(batch[1], predict_logits(m, x1)), 0.0);
}

TEST(Network, ParameterCountMatchesHandCount) {
  ModelConfig c;
  EXPECT_EQ(oracle::param_count(c), 145562u);
  EXPECT_EQ(count_params(build_model<float>(c)), oracle::param_count(c));
  for (auto mode : {BranchMode::sdmsa_only, BranchMode::conv_only}) {
    c.branch_mode = mode;
    EXPECT_EQ(count_params(build_model<float>(c)), oracle::param_count(c));
  }
  c = ModelConfig{};
  c.fusion = Fusion::sum;
  c.deform_flags = "NDND";
  c.num_classes = 4;
  c.in_channels = 3;
  EXPECT_EQ(count_params(build_model<float>(c)), oracle::param_count(c));
}

TEST(Network, DeformFlagsOnlyChangeOffsetNets) {
  ModelConfig c;
  c.deform_flags = "NNNN";
  auto plain = build_model<float>(c);
  auto full = build_model<float>(ModelConfig{});
  std::map<std::string, Shape> ps;
  for (const auto& [n, t] : plain.params) ps[n] = t.shape();
  const std::regex offset_name(R"(.*\.sdmsa\.offset\d+\..*)");
  for (const auto& [n, t] : full.params) {
    if (std::regex_match(n, offset_name)) {
      EXPECT_FALSE(ps.count(n)) << n;
    } else {
      ASSERT_TRUE(ps.count(n)) << n;
      EXPECT_EQ(ps[n], t.shape()) << n;
      ps.erase(n);
    }
  }
  EXPECT_TRUE(ps.empty());
  for (const auto& e : plain.encoder) EXPECT_TRUE(e.sdmsa->offset_nets.empty());
}

TEST(Network, ParameterNamesFollowStageScheme) {
  const std::regex scheme(R"(stage[0-3]\.(embed|enc|dec|down|up|fuse|head)(\.[a-z0-9_]+)+)");
  auto m = build_model<float>(ModelConfig{});
  for (const auto& [n, _] : m.params) EXPECT_TRUE(std::regex_match(n, scheme)) << n;
  EXPECT_EQ(m.params.front().first, "stage0.embed.conv0.weight");
  EXPECT_EQ(m.params.back().first, "stage0.head.bias");
  EXPECT_THROW(m.param("nope"), DataError);
}

TEST(Network, BlockNaming) {
  for (int b = 0; b < kBlockCount; ++b) EXPECT_EQ(block_index(block_name(b)), b);
  EXPECT_EQ(block_stage(4), 2);
  EXPECT_EQ(block_stage(6), 0);
  EXPECT_THROW(block_index("stage3.dec"), DataError);
}

TEST(Network, FlopsMatchInstrumentedForward) {
  ModelConfig c;
  EXPECT_EQ(count_flops(c, 32, 32), measured_flops(c, 32, 32));
  EXPECT_EQ(count_flops(c, 64, 32), measured_flops(c, 64, 32));
  c.branch_mode = BranchMode::sdmsa_only;
  c.deform_flags = "DNDN";
  EXPECT_EQ(count_flops(c, 32, 32), measured_flops(c, 32, 32));
  c.branch_mode = BranchMode::conv_only;
  EXPECT_EQ(count_flops(c, 32, 32), measured_flops(c, 32, 32));
}

TEST(Network, FlopsScaleWithArea) {
  ModelConfig c;
  EXPECT_EQ(count_flops(c, 64, 64), 4 * count_flops(c, 32, 32));
  EXPECT_EQ(count_params(build_model<float>(c)), count_params(build_model<float>(c)));
}

TEST(Network, DeadParametersOnlyInSingleKeyBottleneck) {
  auto m = build_model<float>(ModelConfig{});
  auto sample = synth_dataset(1, 32, 32, 2, 4)[0];
  auto loss = combined_loss(forward(m, sample.image).logits, sample.label, 1.0, 1.0).total;
  loss.backward();
  std::set<std::string> dead;
  for (const auto& [n, t] : m.params) {
    ASSERT_TRUE(t.has_grad()) << n;
    double norm = 0;
    for (float g : t.grad()) {
      ASSERT_TRUE(std::isfinite(g)) << n;
      norm += double(g) * g;
    }
    if (norm == 0) dead.insert(n);
  }
  // The bottleneck runs at 1x1 with a single key per window. Softmax over one
  // score is constant, and every sampling point clamps onto the only pixel, so
  // scores and offsets carry no gradient: w_q, w_k, the bias table and the
  // offset nets are dead there. Values and the output projection still learn.
  std::set<std::string> expect{"stage3.enc.sdmsa.w_q", "stage3.enc.sdmsa.w_k", "stage3.enc.sdmsa.bias_table"};
  for (int j = 0; j < 4; ++j)
    for (const char* t : {"dw.weight", "dw.bias", "pw.weight", "pw.bias"})
      expect.insert("stage3.enc.sdmsa.offset" + std::to_string(j) + "." + t);
  EXPECT_EQ(dead, expect);
}

TEST(Network, TracesPerAttentionBlock) {
  auto m = build_model<float>(ModelConfig{});
  ForwardOptions<float> opt;
  opt.trace = true;
  auto r = forward(m, test::rand_f({1, 32, 32}, 5, 0, 1), opt);
  for (const auto& b : r.blocks) {
    ASSERT_TRUE(b.trace.has_value()) << b.name;
    EXPECT_EQ(b.trace->layout.window, b.layout.window);
    EXPECT_EQ(b.sdmsa_input.shape(), b.output.shape());
  }
  ModelConfig c;
  c.branch_mode = BranchMode::conv_only;
  auto rc = forward(build_model<float>(c), test::rand_f({1, 32, 32}, 5, 0, 1), opt);
  for (const auto& b : rc.blocks) EXPECT_FALSE(b.trace.has_value());
}

TEST(Network, BlockHookRewritesOutputs) {
  auto m = build_model<double>(ModelConfig{});
  auto x = test::rand_t({1, 32, 32}, 6, 0, 1, false);
  ForwardOptions<double> opt;
  opt.block_hook = [](int b, const Tensor<double>& y) { return b == 6 ? scale(y, 0.0) : y; };
  auto r = forward(m, x, opt);
  // Head sees a zero map, so every logit equals the head bias (zero at init).
  for (double v : r.logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Network, CheckpointRoundTrip) {
  ModelConfig c;
  c.deform_flags = "DNDN";
  c.seed = 9;
  auto m = build_model<float>(c);
  const auto ck = model_checkpoint(m);
  EXPECT_EQ(ck.entries.front().first, "meta.config");
  EXPECT_EQ(ck.entries.size(), m.params.size() + 1);
  EXPECT_EQ(model_config_from_json(text_of(ck.at("meta.config"))).deform_flags, "DNDN");
  auto back = load_model<float>(ck);
  auto x = test::rand_f({1, 32, 32}, 7, 0, 1);
  EXPECT_EQ(test::max_abs_diff(predict_logits(m, x), predict_logits(back, x)), 0.0);

  auto other = build_model<float>(ModelConfig{});
  EXPECT_THROW(load_params(other, ck), DataError);
}

TEST(Network, ConvertPrecision) {
  auto m = build_model<float>(ModelConfig{});
  auto d = convert_model<double>(m);
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (std::size_t j = 0; j < m.params[i].second.numel(); ++j)
      ASSERT_EQ(double(m.params[i].second.data()[j]), d.params[i].second.data()[j]);
  auto x = test::rand_f({1, 32, 32}, 8, 0, 1);
  auto xd = Tensor<double>(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  auto lf = predict_logits(m, x);
  auto ld = predict_logits(d, xd);
  for (std::size_t i = 0; i < lf.numel(); ++i) EXPECT_NEAR(lf.data()[i], ld.data()[i], 1e-4);
}
