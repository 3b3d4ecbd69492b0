#include "sdah/blocks.hpp"

#include "sdah/ops.hpp"

namespace sdah {

BranchMode parse_branch_mode(const std::string& s) {
  if (s == "dual") return BranchMode::dual;
  if (s == "sdmsa_only") return BranchMode::sdmsa_only;
  if (s == "conv_only") return BranchMode::conv_only;
  throw DataError("unknown branch_mode '" + s + "' (expected dual|sdmsa_only|conv_only)");
}

std::string to_string(BranchMode m) {
  switch (m) {
    case BranchMode::dual: return "dual";
    case BranchMode::sdmsa_only: return "sdmsa_only";
    case BranchMode::conv_only: return "conv_only";
  }
  return "?";
}

Fusion parse_fusion(const std::string& s) {
  if (s == "concat") return Fusion::concat;
  if (s == "sum") return Fusion::sum;
  throw DataError("unknown fusion '" + s + "' (expected concat|sum)");
}

std::string to_string(Fusion f) { return f == Fusion::concat ? "concat" : "sum"; }

// ------------------------------------------------------------------ helpers

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("to_tokens: expected [C x H x W]");
  return reshape(permute(x, {1, 2, 0}), Shape{x.dim(1) * x.dim(2), x.dim(0)});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, int height, int width) {
  if (t.rank() != 2 || t.dim(0) != height * width) throw ShapeError("from_tokens: token count mismatch");
  return permute(reshape(t, Shape{height, width, t.dim(1)}), {2, 0, 1});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& l) {
  return add_bias(matmul(x, l.weight), l.bias);
}

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Norm<T>& n) {
  return from_tokens(layer_norm(to_tokens(x), n.gamma, n.beta), x.dim(1), x.dim(2));
}

namespace {

template <typename T>
Tensor<T> apply(const Tensor<T>& x, const Conv<T>& c) {
  return conv2d(x, c.weight, c.bias, {c.stride, c.padding, c.groups});
}

template <typename T>
Linear<T> make_linear(ParamRegistry<T>& reg, const std::string& name, int in, int out) {
  return {reg.uniform(name + ".weight", Shape{in, out}, in), reg.zeros(name + ".bias", Shape{out})};
}

template <typename T>
Norm<T> make_norm(ParamRegistry<T>& reg, const std::string& name, int c) {
  return {reg.ones(name + ".gamma", Shape{c}), reg.zeros(name + ".beta", Shape{c})};
}

template <typename T>
Conv<T> make_conv(ParamRegistry<T>& reg, const std::string& name, int in, int out, int k,
                  int stride, int padding, int groups = 1) {
  Conv<T> c;
  c.weight = reg.uniform(name + ".weight", Shape{out, in / groups, k, k}, (in / groups) * k * k);
  c.bias = reg.zeros(name + ".bias", Shape{out});
  c.stride = stride;
  c.padding = padding;
  c.groups = groups;
  return c;
}

// Transposed conv weights are [in x out x k x k]; each output sees in·ceil(k/s)^2 inputs.
template <typename T>
Conv<T> make_deconv(ParamRegistry<T>& reg, const std::string& name, int in, int out, int k,
                    int stride) {
  const int taps = (k + stride - 1) / stride;
  Conv<T> c;
  c.weight = reg.uniform(name + ".weight", Shape{in, out, k, k}, in * taps * taps);
  c.bias = reg.zeros(name + ".bias", Shape{out});
  c.stride = stride;
  return c;
}

}  // namespace

// -------------------------------------------------------------------- SDAPC

template <typename T>
SdapcParams<T> make_sdapc(ParamRegistry<T>& reg, const std::string& prefix, const SdapcSpec& spec) {
  const int c = spec.channels;
  if (c <= 0 || spec.heads <= 0 || c % spec.heads != 0)
    throw ShapeError("sdapc: heads must divide channels");
  if (spec.offset_kernel % 2 == 0) throw ShapeError("sdapc: offset kernel must be odd");
  const int hidden = c * spec.mlp_ratio;
  SdapcParams<T> p;
  p.spec = spec;
  p.dw1 = make_conv(reg, prefix + ".dw1", c, c, kDwKernel, 1, kDwKernel / 2, c);
  p.ln1 = make_norm(reg, prefix + ".ln1", c);
  p.fc1 = make_linear(reg, prefix + ".fc1", c, hidden);
  p.fc2 = make_linear(reg, prefix + ".fc2", hidden, c);
  p.ln2 = make_norm(reg, prefix + ".ln2", c);
  if (spec.branch != BranchMode::sdmsa_only)
    p.dw2 = make_conv(reg, prefix + ".dw2", c, c, kDwKernel, 1, kDwKernel / 2, c);
  if (spec.branch != BranchMode::conv_only) {
    SdmsaParams<T> s;
    const std::string sp = prefix + ".sdmsa";
    s.channels = c;
    s.heads = spec.heads;
    s.window = spec.window;
    s.gamma_off = spec.gamma_off;
    s.scope = spec.scope;
    s.w_q = reg.uniform(sp + ".w_q", Shape{c, c}, c);
    s.w_k = reg.uniform(sp + ".w_k", Shape{c, c}, c);
    s.w_v = reg.uniform(sp + ".w_v", Shape{c, c}, c);
    s.w_o = reg.uniform(sp + ".w_o", Shape{c, c}, c);
    const int side = 2 * spec.window - 1;
    s.bias_table = reg.zeros(sp + ".bias_table", Shape{spec.heads, side, side});
    if (spec.deform) {
      const int d = c / spec.heads, k = spec.offset_kernel;
      for (int j = 0; j < spec.heads; ++j) {
        const std::string op = sp + ".offset" + std::to_string(j);
        OffsetNet<T> net;
        net.dw_weight = reg.uniform(op + ".dw.weight", Shape{d, 1, k, k}, k * k);
        net.dw_bias = reg.zeros(op + ".dw.bias", Shape{d});
        net.pw_weight = reg.uniform(op + ".pw.weight", Shape{2, d, 1, 1}, d);
        net.pw_bias = reg.zeros(op + ".pw.bias", Shape{2});
        s.offset_nets.push_back(std::move(net));
      }
    }
    p.sdmsa = std::move(s);
  }
  const bool wide = spec.branch == BranchMode::dual && spec.fusion == Fusion::concat;
  p.fc_out = make_linear(reg, prefix + ".fc_out", wide ? 2 * c : c, c);
  return p;
}

template <typename T>
Tensor<T> sdapc_division1(const Tensor<T>& x, const SdapcParams<T>& p) {
  if (x.rank() != 3 || x.dim(0) != p.spec.channels)
    throw ShapeError("sdapc_division1: input " + shape_str(x.shape()) + " does not match width " +
                     std::to_string(p.spec.channels));
  const int h = x.dim(1), w = x.dim(2);
  auto t = to_tokens(apply(x, p.dw1));
  t = layer_norm(t, p.ln1.gamma, p.ln1.beta);
  t = linear(gelu(linear(t, p.fc1)), p.fc2);
  return add(from_tokens(t, h, w), x);
}

template <typename T>
Tensor<T> sdapc_division2(const Tensor<T>& xbar, const SdapcParams<T>& p,
                          const WindowLayout& layout, SdmsaTrace<T>* trace,
                          Tensor<T>* sdmsa_input) {
  if (xbar.rank() != 3 || xbar.dim(0) != p.spec.channels)
    throw ShapeError("sdapc_division2: input does not match block width");
  const int h = xbar.dim(1), w = xbar.dim(2);
  auto normed = from_tokens(layer_norm(to_tokens(xbar), p.ln2.gamma, p.ln2.beta), h, w);
  if (sdmsa_input) *sdmsa_input = normed;

  Tensor<T> attn_tokens, conv_tokens;
  if (p.spec.branch != BranchMode::conv_only)
    attn_tokens = to_tokens(sdmsa(normed, *p.sdmsa, layout, p.spec.deform, trace));
  if (p.spec.branch != BranchMode::sdmsa_only) conv_tokens = to_tokens(apply(normed, *p.dw2));

  Tensor<T> fused;
  switch (p.spec.branch) {
    case BranchMode::dual:
      fused = p.spec.fusion == Fusion::concat ? concat<T>({attn_tokens, conv_tokens}, 1)
                                              : add(attn_tokens, conv_tokens);
      break;
    case BranchMode::sdmsa_only: fused = attn_tokens; break;
    case BranchMode::conv_only: fused = conv_tokens; break;
  }
  return add(from_tokens(linear(fused, p.fc_out), h, w), xbar);
}

template <typename T>
Tensor<T> sdapc_block(const Tensor<T>& x, const SdapcParams<T>& p, const WindowLayout& layout,
                      SdmsaTrace<T>* trace, Tensor<T>* sdmsa_input) {
  return sdapc_division2(sdapc_division1(x, p), p, layout, trace, sdmsa_input);
}

// ------------------------------------------------------------------- stems

template <typename T>
EmbedParams<T> make_conv_embed(ParamRegistry<T>& reg, const std::string& prefix, int in_channels,
                               int width) {
  if (width % 2 != 0) throw ShapeError("conv_embed: width must be even");
  const std::array<int, 5> chans{in_channels, width / 2, width / 2, width, width};
  const std::array<int, 4> strides{2, 1, 2, 1};
  EmbedParams<T> p;
  for (int i = 0; i < 4; ++i) {
    const std::string name = prefix + ".conv" + std::to_string(i);
    p.convs[i] = make_conv(reg, name, chans[i], chans[i + 1], 3, strides[i], 1);
    p.norms[i] = make_norm(reg, prefix + ".norm" + std::to_string(i), chans[i + 1]);
  }
  return p;
}

template <typename T>
Tensor<T> conv_embed(const Tensor<T>& x, const EmbedParams<T>& p) {
  if (x.rank() != 3 || x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0)
    throw ShapeError("conv_embed: input sides must be divisible by 4, got " + shape_str(x.shape()));
  Tensor<T> y = x;
  for (int i = 0; i < 4; ++i) y = channel_norm(gelu(apply(y, p.convs[i])), p.norms[i]);
  return y;
}

template <typename T>
Conv<T> make_deconv_expand(ParamRegistry<T>& reg, const std::string& prefix, int width,
                           int classes) {
  return make_deconv(reg, prefix, width, classes, 4, 4);
}

template <typename T>
Tensor<T> deconv_expand(const Tensor<T>& x, const Conv<T>& p) {
  return deconv2d(x, p.weight, p.bias, p.stride, p.padding);
}

template <typename T>
Conv<T> make_downsample(ParamRegistry<T>& reg, const std::string& prefix, int in, int out) {
  return make_conv(reg, prefix, in, out, 2, 2, 0);
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const Conv<T>& p) {
  if (x.dim(-1) % 2 != 0 || x.dim(-2) % 2 != 0) throw ShapeError("downsample: odd resolution");
  return apply(x, p);
}

template <typename T>
Conv<T> make_upsample(ParamRegistry<T>& reg, const std::string& prefix, int in, int out) {
  return make_deconv(reg, prefix, in, out, 2, 2);
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const Conv<T>& p) {
  return deconv2d(x, p.weight, p.bias, p.stride, p.padding);
}

template <typename T>
Conv<T> make_skip_fuse(ParamRegistry<T>& reg, const std::string& prefix, int width) {
  return make_conv(reg, prefix, 2 * width, width, 1, 1, 0);
}

template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& up, const Tensor<T>& skip, const Conv<T>& p) {
  if (up.shape() != skip.shape())
    throw ShapeError("skip_fuse: " + shape_str(up.shape()) + " vs skip " + shape_str(skip.shape()));
  return apply(concat<T>({up, skip}, 0), p);
}

#define SDAH_INSTANTIATE_BLOCKS(T)                                                             \
  template Tensor<T> to_tokens(const Tensor<T>&);                                              \
  template Tensor<T> from_tokens(const Tensor<T>&, int, int);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Linear<T>&);                               \
  template Tensor<T> channel_norm(const Tensor<T>&, const Norm<T>&);                           \
  template SdapcParams<T> make_sdapc(ParamRegistry<T>&, const std::string&, const SdapcSpec&); \
  template Tensor<T> sdapc_division1(const Tensor<T>&, const SdapcParams<T>&);                 \
  template Tensor<T> sdapc_division2(const Tensor<T>&, const SdapcParams<T>&,                  \
                                     const WindowLayout&, SdmsaTrace<T>*, Tensor<T>*);         \
  template Tensor<T> sdapc_block(const Tensor<T>&, const SdapcParams<T>&, const WindowLayout&, \
                                 SdmsaTrace<T>*, Tensor<T>*);                                  \
  template EmbedParams<T> make_conv_embed(ParamRegistry<T>&, const std::string&, int, int);    \
  template Tensor<T> conv_embed(const Tensor<T>&, const EmbedParams<T>&);                      \
  template Conv<T> make_deconv_expand(ParamRegistry<T>&, const std::string&, int, int);        \
  template Tensor<T> deconv_expand(const Tensor<T>&, const Conv<T>&);                          \
  template Conv<T> make_downsample(ParamRegistry<T>&, const std::string&, int, int);           \
  template Tensor<T> downsample(const Tensor<T>&, const Conv<T>&);                             \
  template Conv<T> make_upsample(ParamRegistry<T>&, const std::string&, int, int);             \
  template Tensor<T> upsample(const Tensor<T>&, const Conv<T>&);                               \
  template Conv<T> make_skip_fuse(ParamRegistry<T>&, const std::string&, int);                 \
  template Tensor<T> skip_fuse(const Tensor<T>&, const Tensor<T>&, const Conv<T>&);

SDAH_INSTANTIATE_BLOCKS(float)
SDAH_INSTANTIATE_BLOCKS(double)

}  // namespace sdah
