#pragma once

#include <functional>
#include <vector>

#include "sdah/network.hpp"
#include "sdah/tensor.hpp"
#include "sdah/training.hpp"

namespace sdah {

struct SlidingConfig {
  int crop = 32;
  int step = 16;
  double sigma_ratio = 1.0 / 8.0;

  void validate() const;
};

/// Paper setting: 224 crops with a 112 stride.
SlidingConfig paper_sliding_config();

/// Separable Gaussian centred on the crop, σ = crop·sigma_ratio, peak 1.
template <typename T>
Tensor<T> gaussian_map(int crop, double sigma_ratio);

/// Tile origins along one axis: multiples of step, plus a last tile flush with
/// the border. Lengths below crop yield the single origin 0.
std::vector<int> tile_starts(int length, int crop, int step);

/// Maps a [C_in x crop x crop] tile to [K x crop x crop] logits.
template <typename T>
using TilePredictor = std::function<Tensor<T>(const Tensor<T>& tile)>;

/// Gaussian-weighted average of per-tile softmax probabilities, [K x H x W].
/// Images smaller than the crop are zero-padded and cropped back.
template <typename T>
Tensor<T> sliding_predict(const TilePredictor<T>& predictor, int classes, const Tensor<T>& image,
                          const SlidingConfig& cfg);
template <typename T>
Tensor<T> sliding_predict(const Model<T>& model, const Tensor<T>& image, const SlidingConfig& cfg);

/// Per-pixel argmax over the class axis of [K x H x W]; ties pick the lower class.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& probs);

}  // namespace sdah
