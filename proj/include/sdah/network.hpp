#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdah/attention.hpp"
#include "sdah/blocks.hpp"
#include "sdah/io.hpp"
#include "sdah/tensor.hpp"

namespace sdah {

inline constexpr int kStages = 4;      // three encoder stages plus the bottleneck
inline constexpr int kBlockCount = 7;  // enc0..2, bottleneck, dec2..0
inline constexpr int kInputMultiple = 32;

/// Every architectural hyperparameter. Defaults are the desk-scale micro config.
struct ModelConfig {
  int in_channels = 1;
  int num_classes = 2;
  int stem_width = 8;
  std::array<int, kStages> stage_widths{8, 16, 32, 64};
  std::array<int, kStages> window_sizes{4, 4, 2, 2};
  std::array<int, kStages> num_heads{2, 2, 4, 4};
  /// Encoder stages 1..3 then bottleneck; 'D' deformable, 'N' plain shifted window.
  std::string deform_flags = "DDDD";
  BranchMode branch_mode = BranchMode::dual;
  double gamma_off = 1.0;
  int mlp_ratio = 4;
  Fusion fusion = Fusion::concat;
  SampleScope sample_scope = SampleScope::global;
  int offset_kernel = 5;
  /// Nominal input side; fixes the per-stage window sizes actually used.
  int image_size = 32;
  std::uint64_t seed = 0;

  /// Throws DataError naming the first violated invariant.
  void validate() const;
  bool deform(int stage) const { return deform_flags.at(stage) == 'D'; }
  /// Feature side at stage i for the nominal image size.
  int stage_resolution(int stage) const { return image_size / 4 >> stage; }
  /// min(window_sizes[i], stage resolution).
  int resolved_window(int stage) const;
  /// Shift 0 on even stages, window/2 on odd ones.
  int stage_shift(int stage) const;
};

/// Paper-scale preset: 224x224 input, 7x7 windows where they fit.
ModelConfig paper_config(int in_channels, int num_classes);

template <typename T>
struct Model {
  ModelConfig config;
  EmbedParams<T> embed;
  std::array<SdapcParams<T>, kStages> encoder;  // [3] is the bottleneck
  std::array<Conv<T>, kStages - 1> down;
  std::array<Conv<T>, kStages - 1> up;    // up[i]: stage i+1 -> stage i
  std::array<Conv<T>, kStages - 1> fuse;
  std::array<SdapcParams<T>, kStages - 1> decoder;  // decoder[i] runs at stage i
  Conv<T> head;
  std::vector<std::pair<std::string, Tensor<T>>> params;  // checkpoint order

  Tensor<T> param(const std::string& name) const;
  void zero_grad();
};

/// Builds and initializes every parameter from config.seed.
template <typename T>
Model<T> build_model(const ModelConfig& config);

std::string block_name(int block);  // "stage0.enc" ... "stage3.enc", "stage2.dec" ... "stage0.dec"
int block_index(const std::string& name);
/// Resolution stage of a block in execution order.
int block_stage(int block);

template <typename T>
struct BlockRecord {
  std::string name;
  WindowLayout layout;
  Tensor<T> output;         // graph handle, gradients land here after backward
  Tensor<T> sdmsa_input;    // LN(x̄) fed to the attention branch
  std::optional<SdmsaTrace<T>> trace;  // when tracing and the block has an attention branch
};

template <typename T>
struct ForwardOptions {
  bool trace = false;
  /// Optional rewrite of each block output before it is consumed downstream.
  std::function<Tensor<T>(int block, const Tensor<T>& output)> block_hook;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [K x H x W]
  std::vector<BlockRecord<T>> blocks;
};

/// image [C_in x H x W] with H, W divisible by 32.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& image,
                         const ForwardOptions<T>& options = {});
template <typename T>
Tensor<T> predict_logits(const Model<T>& model, const Tensor<T>& image);
template <typename T>
std::vector<Tensor<T>> forward_batch(const Model<T>& model, const std::vector<Tensor<T>>& images);

template <typename T>
std::uint64_t count_params(const Model<T>& model);
/// Analytic FLOPs of one forward at H x W (see flops.hpp for the conventions).
std::uint64_t count_flops(const ModelConfig& config, int height, int width);
template <typename T>
std::uint64_t count_flops(const Model<T>& model, int height, int width) {
  return count_flops(model.config, height, width);
}

/// Parameters plus the config as a "meta.config" JSON entry.
template <typename T>
Checkpoint model_checkpoint(const Model<T>& model);
/// Rebuilds the model from "meta.config" and copies every parameter.
template <typename T>
Model<T> load_model(const Checkpoint& ck);
/// Copies parameter values from a checkpoint produced by a same-config model.
template <typename T>
void load_params(Model<T>& model, const Checkpoint& ck);
/// Same architecture and values at another precision.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& model);

}  // namespace sdah
