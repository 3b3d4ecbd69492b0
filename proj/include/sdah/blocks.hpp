#pragma once

#include <array>
#include <optional>
#include <string>

#include "sdah/attention.hpp"
#include "sdah/params.hpp"
#include "sdah/tensor.hpp"

namespace sdah {

/// Which branches of the second division are active.
enum class BranchMode { dual, sdmsa_only, conv_only };
/// How the dual branches are combined before fc_out.
enum class Fusion { concat, sum };

BranchMode parse_branch_mode(const std::string& s);
std::string to_string(BranchMode m);
Fusion parse_fusion(const std::string& s);
std::string to_string(Fusion f);

inline constexpr int kDwKernel = 7;

/// y = x·W + b with W [in x out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

template <typename T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;
};

struct SdapcSpec {
  int channels = 0;
  int heads = 1;
  int window = 1;
  int mlp_ratio = 4;
  int offset_kernel = 5;
  double gamma_off = 1.0;
  bool deform = true;
  BranchMode branch = BranchMode::dual;
  Fusion fusion = Fusion::concat;
  SampleScope scope = SampleScope::global;
};

template <typename T>
struct SdapcParams {
  SdapcSpec spec;
  Conv<T> dw1;
  Norm<T> ln1;
  Linear<T> fc1, fc2;
  Norm<T> ln2;
  std::optional<Conv<T>> dw2;            // absent for sdmsa_only
  std::optional<SdmsaParams<T>> sdmsa;   // absent for conv_only
  Linear<T> fc_out;                      // 2C -> C for dual+concat, C -> C otherwise
};

template <typename T>
SdapcParams<T> make_sdapc(ParamRegistry<T>& reg, const std::string& prefix, const SdapcSpec& spec);

/// x̄ = FC2(GELU(FC1(LN(DwConv(x))))) + x
template <typename T>
Tensor<T> sdapc_division1(const Tensor<T>& x, const SdapcParams<T>& p);
/// x̂ = FC(fuse(SDMSA(LN(x̄)), DwConv(LN(x̄)))) + x̄
template <typename T>
Tensor<T> sdapc_division2(const Tensor<T>& xbar, const SdapcParams<T>& p,
                          const WindowLayout& layout, SdmsaTrace<T>* trace = nullptr,
                          Tensor<T>* sdmsa_input = nullptr);
template <typename T>
Tensor<T> sdapc_block(const Tensor<T>& x, const SdapcParams<T>& p, const WindowLayout& layout,
                      SdmsaTrace<T>* trace = nullptr, Tensor<T>* sdmsa_input = nullptr);

/// Four 3x3 convs, strides (2,1,2,1), widths C_in -> C/2 -> C/2 -> C -> C,
/// each followed by GELU then channel LayerNorm.
template <typename T>
struct EmbedParams {
  std::array<Conv<T>, 4> convs;
  std::array<Norm<T>, 4> norms;
};

template <typename T>
EmbedParams<T> make_conv_embed(ParamRegistry<T>& reg, const std::string& prefix, int in_channels,
                               int width);
template <typename T>
Tensor<T> conv_embed(const Tensor<T>& x, const EmbedParams<T>& p);

/// Single transposed conv, kernel 4 stride 4, to `classes` logit maps.
template <typename T>
Conv<T> make_deconv_expand(ParamRegistry<T>& reg, const std::string& prefix, int width, int classes);
template <typename T>
Tensor<T> deconv_expand(const Tensor<T>& x, const Conv<T>& p);

/// 2x2 stride-2 conv, width -> 2·width by default.
template <typename T>
Conv<T> make_downsample(ParamRegistry<T>& reg, const std::string& prefix, int in, int out);
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const Conv<T>& p);

/// 2x2 stride-2 transposed conv.
template <typename T>
Conv<T> make_upsample(ParamRegistry<T>& reg, const std::string& prefix, int in, int out);
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const Conv<T>& p);

/// Channel concat [up; skip] then 1x1 conv back to the stage width.
template <typename T>
Conv<T> make_skip_fuse(ParamRegistry<T>& reg, const std::string& prefix, int width);
template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& up, const Tensor<T>& skip, const Conv<T>& p);

// [C x H x W] <-> [H*W x C]
template <typename T> Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T> Tensor<T> from_tokens(const Tensor<T>& t, int height, int width);
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Linear<T>& l);
/// LayerNorm over the channel axis of a [C x H x W] map.
template <typename T> Tensor<T> channel_norm(const Tensor<T>& x, const Norm<T>& n);

}  // namespace sdah
