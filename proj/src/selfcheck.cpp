#include "sdah/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "sdah/attention.hpp"
#include "sdah/blocks.hpp"
#include "sdah/flops.hpp"
#include "sdah/grad_check.hpp"
#include "sdah/io.hpp"
#include "sdah/network.hpp"
#include "sdah/ops.hpp"
#include "sdah/rng.hpp"
#include "sdah/training.hpp"

namespace sdah {

namespace {

Tensor<double> random_tensor(Shape shape, SplitMix64& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

CheckResult grad_case(const std::string& name, const std::function<Tensor<double>()>& fn,
                      std::vector<Tensor<double>> wrt, double tol) {
  GradCheckOptions opt;
  opt.tolerance = tol;
  const auto r = grad_check(fn, std::move(wrt), opt);
  return {name, r.passed, "max rel err " + fmt(r.max_rel_error)};
}

template <typename F>
CheckResult guarded(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

}  // namespace

std::vector<CheckResult> run_selfcheck() {
  std::vector<CheckResult> out;
  SplitMix64 rng(20240601);

  out.push_back(guarded("grad.matmul", [&] {
    auto a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng);
    return grad_case("grad.matmul", [=] { return matmul(a, b); }, {a, b}, 1e-6);
  }));
  out.push_back(guarded("grad.conv2d", [&] {
    auto x = random_tensor({2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng),
         b = random_tensor({3}, rng);
    return grad_case("grad.conv2d", [=] { return conv2d(x, w, b, {2, 1, 1}); }, {x, w, b}, 1e-5);
  }));
  out.push_back(guarded("grad.bilinear_sample", [&] {
    auto f = random_tensor({2, 4, 5}, rng);
    std::vector<double> p{0.3, 1.7, 2.25, 3.6, 1.5, 0.45};
    auto pts = Tensor<double>({3, 2}, p, true);
    return grad_case("grad.bilinear_sample", [=] { return bilinear_sample(f, pts); }, {f, pts}, 1e-5);
  }));
  out.push_back(guarded("grad.softmax_layernorm_gelu", [&] {
    auto x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    return grad_case("grad.softmax_layernorm_gelu",
                     [=] { return softmax(gelu(layer_norm(x, g, b)), 1); }, {x, g, b}, 1e-5);
  }));
  out.push_back(guarded("grad.sdapc_block", [&] {
    ParamRegistry<double> reg(7);
    SdapcSpec spec;
    spec.channels = 4;
    spec.heads = 2;
    spec.window = 2;
    auto p = make_sdapc(reg, "blk", spec);
    auto x = random_tensor({4, 4, 4}, rng);
    const auto layout = WindowLayout::make(4, 4, 2, 1);
    return grad_case("grad.sdapc_block", [=] { return sdapc_block(x, p, layout); }, {x}, 1e-4);
  }));
  out.push_back(guarded("io.sdt_sdck_roundtrip", [&] {
    auto t = random_tensor({2, 3}, rng);
    Checkpoint ck;
    ck.put("a.b", blob_of(t));
    ck.put("txt", blob_of_text("hello"));
    std::stringstream ss;
    write_checkpoint(ss, ck);
    const auto back = read_checkpoint(ss);
    const auto v = back.at("a.b").to_tensor<double>();
    bool ok = back.entries.size() == 2 && text_of(back.at("txt")) == "hello";
    for (std::size_t i = 0; ok && i < t.numel(); ++i) ok = v.data()[i] == t.data()[i];
    return CheckResult{"io.sdt_sdck_roundtrip", ok, ok ? "exact" : "mismatch"};
  }));
  out.push_back(guarded("attention.window_roundtrip", [&] {
    bool ok = window_count(224, 224, 7) == 1024;
    for (int shift : {0, 2}) {
      auto x = random_tensor({3, 8, 12}, rng);
      const auto l = WindowLayout::make(8, 12, 4, shift);
      const auto y = window_merge(window_partition(x, l), l);
      for (std::size_t i = 0; ok && i < x.numel(); ++i) ok = y.data()[i] == x.data()[i];
    }
    return CheckResult{"attention.window_roundtrip", ok, ok ? "exact" : "mismatch"};
  }));
  out.push_back(guarded("attention.zero_offset_equivalence", [&] {
    ParamRegistry<double> reg(11);
    SdapcSpec spec;
    spec.channels = 8;
    spec.heads = 2;
    spec.window = 4;
    auto p = make_sdapc(reg, "blk", spec);
    for (auto& net : p.sdmsa->offset_nets)
      for (auto* t : {&net.dw_weight, &net.pw_weight})
        for (auto& v : t->mutable_data()) v = 0;
    auto x = random_tensor({8, 8, 8}, rng);
    const auto l = WindowLayout::make(8, 8, 4, 2);
    const auto a = sdmsa(x, *p.sdmsa, l, true), b = sdmsa(x, *p.sdmsa, l, false);
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
    return CheckResult{"attention.zero_offset_equivalence", worst <= 1e-6, "max abs diff " + fmt(worst)};
  }));
  out.push_back(guarded("training.lr_schedule", [&] {
    TrainConfig c;
    const bool ok = std::fabs(lr_at(0, c) - 2e-4) < 1e-18 && std::fabs(lr_at(50'000, c) - 1e-4) < 1e-18 &&
                    std::fabs(lr_at(69'999, c) - 5e-5) < 1e-18;
    return CheckResult{"training.lr_schedule", ok, ok ? "2e-4, 1e-4, 5e-5" : "unexpected values"};
  }));
  out.push_back(guarded("network.flop_accounting", [&] {
    ModelConfig cfg;
    auto model = build_model<float>(cfg);
    const auto image = Tensor<float>::full({1, 32, 32}, 0.5f);
    std::uint64_t measured = 0;
    {
      NoGradGuard ng;
      FlopScope scope;
      forward(model, image);
      measured = scope.count();
    }
    const auto analytic = count_flops(cfg, 32, 32);
    return CheckResult{"network.flop_accounting", measured == analytic,
                       "analytic " + std::to_string(analytic) + ", measured " + std::to_string(measured)};
  }));
  return out;
}

}  // namespace sdah
