#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sdah/attention.hpp"
#include "sdah/network.hpp"
#include "sdah/tensor.hpp"
#include "sdah/training.hpp"

namespace sdah {

/// How the attention heatmap reduces the per-head attention matrices.
enum class HeatmapReduction {
  received,  // attention each key receives, summed over queries and heads
  peak,      // largest attention any single query/head gives the key
};

/// Attention received by each sampled key, summed over queries and heads and
/// bilinearly splatted at its sampling location, on the unshifted map [H x W].
/// Min-max normalized to [0, 1]; a constant map becomes all ones (or all
/// zeros when it is identically zero).
template <typename T>
Tensor<T> attention_heatmap(const SdmsaTrace<T>& trace,
                            HeatmapReduction reduction = HeatmapReduction::received);
/// Same reduction without the normalization.
template <typename T>
Tensor<T> attention_mass(const SdmsaTrace<T>& trace,
                         HeatmapReduction reduction = HeatmapReduction::received);

/// One row per (window, head, point): block,window,head,ref_y,ref_x,def_y,def_x.
/// Keeps every `stride`-th point of each window (stride 1 = full data).
template <typename T>
std::string deformation_points_csv(const std::string& block, const SdmsaTrace<T>& trace,
                                   int stride = 1);

/// Per-pixel offsets averaged over heads on the unshifted map: red and green
/// encode Δy and Δx around 128, blue the magnitude. Binary PPM (P6).
template <typename T>
std::vector<std::uint8_t> deformation_field_ppm(const SdmsaTrace<T>& trace);

template <typename T>
struct GradCamResult {
  Tensor<T> map;                  // [H x W], max-normalized, >= 0
  std::vector<double> channel_weights;
  Tensor<T> features;             // target block output [C x h x w]
  Tensor<T> logits;
};

/// Seg-Grad-CAM: score = sum of class logits over the ROI (1 = inside, [H x W]).
template <typename T>
GradCamResult<T> seg_grad_cam(const Model<T>& model, const Tensor<T>& image, int target_class,
                              int target_block, const std::vector<std::uint8_t>& roi);
/// The ROI score itself; `hook` may rewrite block outputs (used by finite differences).
template <typename T>
double grad_cam_score(const Model<T>& model, const Tensor<T>& image, int target_class,
                      const std::vector<std::uint8_t>& roi, const ForwardOptions<T>& options = {});

/// Bilinear resize of a [h x w] map to [H x W] with half-pixel centres.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& map, int height, int width);

/// Binary PGM (P5) of a [H x W] map in [0, 1], rounded to 0..255.
template <typename T>
std::vector<std::uint8_t> map_pgm(const Tensor<T>& map);
std::vector<std::uint8_t> label_pgm(const LabelMap& label, int classes);

struct ExplainRequest {
  std::string case_name = "case";
  std::vector<int> blocks;  // empty = every block with an attention branch
  int target_class = 1;
  std::vector<std::uint8_t> roi;  // empty = pixels predicted as target_class (or all pixels)
  int point_stride = 1;
};

/// Writes explain/<case>/<block>/{attn.pgm, attn.sdt, points.csv, field.ppm,
/// gradcam.pgm} under `root`. Returns the written files in order.
template <typename T>
std::vector<std::filesystem::path> write_explain(const std::filesystem::path& root,
                                                 const Model<T>& model, const Tensor<T>& image,
                                                 const ExplainRequest& request);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace sdah
