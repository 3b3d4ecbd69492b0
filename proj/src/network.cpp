#include "sdah/network.hpp"

#include <algorithm>

#include "sdah/config.hpp"
#include "sdah/error.hpp"
#include "sdah/flops.hpp"
#include "sdah/ops.hpp"

namespace sdah {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid model config: " + what); };
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (stem_width != stage_widths[0]) fail("stem_width must equal stage_widths[0]");
  if (stem_width % 2 != 0) fail("stem_width must be even");
  if (deform_flags.size() != kStages) fail("deform_flags must have 4 entries");
  for (char c : deform_flags)
    if (c != 'D' && c != 'N') fail("deform_flags entries must be 'D' or 'N'");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (offset_kernel < 1 || offset_kernel % 2 == 0) fail("offset_kernel must be odd");
  if (!(gamma_off >= 0.0)) fail("gamma_off must be >= 0");
  if (image_size < kInputMultiple || image_size % kInputMultiple != 0)
    fail("image_size must be a positive multiple of 32");
  for (int i = 0; i < kStages; ++i) {
    const std::string s = "stage " + std::to_string(i) + ": ";
    if (stage_widths[i] < 1 || num_heads[i] < 1) fail(s + "widths and heads must be positive");
    if (stage_widths[i] % num_heads[i] != 0) fail(s + "num_heads must divide stage width");
    if (window_sizes[i] < 1) fail(s + "window size must be positive");
    if (stage_resolution(i) % resolved_window(i) != 0)
      fail(s + "window " + std::to_string(resolved_window(i)) + " does not divide resolution " +
           std::to_string(stage_resolution(i)));
  }
}

int ModelConfig::resolved_window(int stage) const {
  return std::min(window_sizes.at(stage), stage_resolution(stage));
}

int ModelConfig::stage_shift(int stage) const {
  return stage % 2 == 1 ? resolved_window(stage) / 2 : 0;
}

ModelConfig paper_config(int in_channels, int num_classes) {
  ModelConfig c;
  c.in_channels = in_channels;
  c.num_classes = num_classes;
  c.stem_width = 96;
  c.stage_widths = {96, 192, 384, 768};
  c.window_sizes = {7, 7, 7, 7};
  c.num_heads = {3, 6, 12, 24};
  c.image_size = 224;
  return c;
}

std::string block_name(int block) {
  if (block < 0 || block >= kBlockCount) throw ShapeError("block index out of range");
  if (block < kStages) return "stage" + std::to_string(block) + ".enc";
  return "stage" + std::to_string(kBlockCount - 1 - block) + ".dec";
}

int block_index(const std::string& name) {
  for (int b = 0; b < kBlockCount; ++b)
    if (block_name(b) == name) return b;
  throw DataError("unknown block '" + name + "' (expected stage{0..3}.enc or stage{0..2}.dec)");
}

int block_stage(int block) { return block < kStages ? block : kBlockCount - 1 - block; }

template <typename T>
Tensor<T> Model<T>::param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw DataError("model has no parameter '" + name + "'");
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& [_, t] : params) t.zero_grad();
}

namespace {

SdapcSpec stage_spec(const ModelConfig& c, int stage) {
  SdapcSpec s;
  s.channels = c.stage_widths[stage];
  s.heads = c.num_heads[stage];
  s.window = c.resolved_window(stage);
  s.mlp_ratio = c.mlp_ratio;
  s.offset_kernel = c.offset_kernel;
  s.gamma_off = c.gamma_off;
  s.deform = c.deform(stage);
  s.branch = c.branch_mode;
  s.fusion = c.fusion;
  s.scope = c.sample_scope;
  return s;
}

std::string stage_prefix(int stage) { return "stage" + std::to_string(stage); }

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  config.validate();
  ParamRegistry<T> reg(config.seed);
  Model<T> m;
  m.config = config;
  const auto& w = config.stage_widths;
  m.embed = make_conv_embed(reg, "stage0.embed", config.in_channels, config.stem_width);
  for (int i = 0; i < kStages; ++i) {
    m.encoder[i] = make_sdapc(reg, stage_prefix(i) + ".enc", stage_spec(config, i));
    if (i + 1 < kStages) m.down[i] = make_downsample(reg, stage_prefix(i) + ".down", w[i], w[i + 1]);
  }
  for (int i = kStages - 2; i >= 0; --i) {
    m.up[i] = make_upsample(reg, stage_prefix(i) + ".up", w[i + 1], w[i]);
    m.fuse[i] = make_skip_fuse(reg, stage_prefix(i) + ".fuse", w[i]);
    m.decoder[i] = make_sdapc(reg, stage_prefix(i) + ".dec", stage_spec(config, i));
  }
  m.head = make_deconv_expand(reg, "stage0.head", w[0], config.num_classes);
  m.params = reg.release();
  return m;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& image,
                         const ForwardOptions<T>& options) {
  const auto& cfg = model.config;
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels)
    throw ShapeError("forward: expected [" + std::to_string(cfg.in_channels) + " x H x W] image, got " +
                     shape_str(image.shape()));
  const int H = image.dim(1), W = image.dim(2);
  if (H % kInputMultiple != 0 || W % kInputMultiple != 0)
    throw ShapeError("forward: input sides must be divisible by 32, got " + shape_str(image.shape()));

  std::array<WindowLayout, kStages> layouts;
  for (int i = 0; i < kStages; ++i)
    layouts[i] = WindowLayout::make((H / 4) >> i, (W / 4) >> i, cfg.resolved_window(i),
                                    cfg.stage_shift(i));

  ForwardResult<T> result;
  result.blocks.reserve(kBlockCount);
  auto run_block = [&](int b, const Tensor<T>& x, const SdapcParams<T>& p) {
    BlockRecord<T> rec;
    rec.name = block_name(b);
    rec.layout = layouts[block_stage(b)];
    SdmsaTrace<T> trace;
    const bool traced = options.trace && p.sdmsa.has_value();
    Tensor<T> out = sdapc_block(x, p, rec.layout, traced ? &trace : nullptr, &rec.sdmsa_input);
    if (options.block_hook) out = options.block_hook(b, out);
    rec.output = out;
    if (traced) rec.trace = std::move(trace);
    result.blocks.push_back(std::move(rec));
    return out;
  };

  std::array<Tensor<T>, kStages - 1> skips;
  Tensor<T> x = conv_embed(image, model.embed);
  for (int i = 0; i < kStages - 1; ++i) {
    skips[i] = run_block(i, x, model.encoder[i]);
    x = downsample(skips[i], model.down[i]);
  }
  x = run_block(kStages - 1, x, model.encoder[kStages - 1]);
  for (int i = kStages - 2; i >= 0; --i) {
    x = skip_fuse(upsample(x, model.up[i]), skips[i], model.fuse[i]);
    x = run_block(kBlockCount - 1 - i, x, model.decoder[i]);
  }
  result.logits = deconv_expand(x, model.head);
  return result;
}

template <typename T>
Tensor<T> predict_logits(const Model<T>& model, const Tensor<T>& image) {
  NoGradGuard guard;
  return forward(model, image).logits;
}

template <typename T>
std::vector<Tensor<T>> forward_batch(const Model<T>& model, const std::vector<Tensor<T>>& images) {
  std::vector<Tensor<T>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(forward(model, img).logits);
  return out;
}

template <typename T>
std::uint64_t count_params(const Model<T>& model) {
  std::uint64_t n = 0;
  for (const auto& [_, t] : model.params) n += t.numel();
  return n;
}

namespace {

using u64 = std::uint64_t;

u64 sdapc_flops(const ModelConfig& c, int stage, u64 h, u64 w) {
  const u64 ch = c.stage_widths[stage], hw = h * w, hidden = ch * c.mlp_ratio;
  const u64 kdw = static_cast<u64>(kDwKernel) * kDwKernel;
  u64 f = 2 * ch * hw * kdw;                  // dw1
  f += 2 * hw * ch * hidden * 2;              // fc1, fc2
  if (c.branch_mode != BranchMode::sdmsa_only) f += 2 * ch * hw * kdw;  // dw2
  if (c.branch_mode != BranchMode::conv_only) {
    const u64 ws = c.resolved_window(stage), np = ws * ws, nw = hw / np;
    const u64 heads = c.num_heads[stage], d = ch / heads;
    const u64 k2 = static_cast<u64>(c.offset_kernel) * c.offset_kernel;
    f += 2 * hw * ch * ch * 2;  // W_Q, W_O
    for (u64 j = 0; j < heads; ++j) {
      if (c.deform(stage)) {
        f += 2 * nw * d * np * k2;             // offset depthwise conv
        f += 2 * nw * 2 * np * d;              // offset pointwise conv
        f += kBilinearFlopsPerSample * hw * ch;  // key/value feature sampling
      }
      f += 2 * hw * ch * d * 2;                // W_K, W_V slices
      f += 2 * nw * np * np * d;               // q·kᵀ
      f += kBilinearFlopsPerSample * nw * np * np;  // bias interpolation
      f += kSoftmaxFlopsPerElement * nw * np * np;
      f += 2 * nw * np * np * d;               // attn·v
    }
  }
  const bool wide = c.branch_mode == BranchMode::dual && c.fusion == Fusion::concat;
  f += 2 * hw * (wide ? 2 * ch : ch) * ch;    // fc_out
  return f;
}

}  // namespace

std::uint64_t count_flops(const ModelConfig& config, int height, int width) {
  config.validate();
  if (height % kInputMultiple != 0 || width % kInputMultiple != 0)
    throw ShapeError("count_flops: input sides must be divisible by 32");
  const auto& w = config.stage_widths;
  u64 f = 0;
  // stem: 3x3 convs with strides (2,1,2,1)
  const std::array<u64, 5> chans{static_cast<u64>(config.in_channels), static_cast<u64>(w[0] / 2),
                                 static_cast<u64>(w[0] / 2), static_cast<u64>(w[0]),
                                 static_cast<u64>(w[0])};
  const std::array<u64, 4> sides{2, 2, 4, 4};
  for (int i = 0; i < 4; ++i)
    f += 2 * chans[i + 1] * (height / sides[i]) * (width / sides[i]) * chans[i] * 9;
  for (int i = 0; i < kStages; ++i) {
    const u64 h = (height / 4) >> i, wd = (width / 4) >> i;
    f += sdapc_flops(config, i, h, wd);
    if (i + 1 < kStages) {
      const u64 hw_next = (h / 2) * (wd / 2);
      f += 2 * w[i + 1] * hw_next * w[i] * 4;                  // downsample
      f += 2 * static_cast<u64>(w[i + 1]) * w[i] * 4 * hw_next;  // upsample
      f += 2 * static_cast<u64>(w[i]) * h * wd * 2 * w[i];      // skip fuse
      f += sdapc_flops(config, i, h, wd);                       // decoder block
    }
  }
  const u64 h0 = height / 4, w0 = width / 4;
  f += 2 * static_cast<u64>(w[0]) * config.num_classes * 16 * h0 * w0;  // head
  return f;
}

template <typename T>
Checkpoint model_checkpoint(const Model<T>& model) {
  Checkpoint ck;
  ck.put("meta.config", blob_of_text(model_config_to_json(model.config)));
  for (const auto& [name, t] : model.params) ck.put(name, blob_of(t));
  return ck;
}

template <typename T>
void load_params(Model<T>& model, const Checkpoint& ck) {
  for (auto& [name, t] : model.params) {
    const ArrayBlob* blob = ck.find(name);
    if (!blob) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (blob->shape != t.shape())
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(blob->shape) +
                      ", model expects " + shape_str(t.shape()));
    auto src = blob->to_tensor<T>();
    auto dst = t.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

template <typename T>
Model<T> load_model(const Checkpoint& ck) {
  const ArrayBlob* meta = ck.find("meta.config");
  if (!meta) throw DataError("checkpoint has no meta.config entry");
  Model<T> model = build_model<T>(model_config_from_json(text_of(*meta)));
  load_params(model, ck);
  return model;
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& model) {
  Model<To> out = build_model<To>(model.config);
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    auto src = model.params[i].second.data();
    auto dst = out.params[i].second.mutable_data();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<To>(src[k]);
  }
  return out;
}

#define SDAH_INSTANTIATE_NETWORK(T)                                                      \
  template struct Model<T>;                                                              \
  template Model<T> build_model<T>(const ModelConfig&);                                  \
  template ForwardResult<T> forward(const Model<T>&, const Tensor<T>&,                   \
                                    const ForwardOptions<T>&);                           \
  template Tensor<T> predict_logits(const Model<T>&, const Tensor<T>&);                  \
  template std::vector<Tensor<T>> forward_batch(const Model<T>&,                         \
                                                const std::vector<Tensor<T>>&);          \
  template std::uint64_t count_params(const Model<T>&);                                  \
  template Checkpoint model_checkpoint(const Model<T>&);                                 \
  template void load_params(Model<T>&, const Checkpoint&);                               \
  template Model<T> load_model<T>(const Checkpoint&);

SDAH_INSTANTIATE_NETWORK(float)
SDAH_INSTANTIATE_NETWORK(double)

template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);
template Model<double> convert_model<double, double>(const Model<double>&);

}  // namespace sdah
