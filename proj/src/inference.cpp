#include "sdah/inference.hpp"

#include <cmath>
#include <limits>

#include "sdah/error.hpp"
#include "sdah/ops.hpp"

namespace sdah {

void SlidingConfig::validate() const {
  if (crop < kInputMultiple || crop % kInputMultiple != 0)
    throw DataError("sliding config: crop must be a positive multiple of 32");
  if (step < 1 || step > crop) throw DataError("sliding config: step must lie in [1, crop]");
  if (!(sigma_ratio > 0)) throw DataError("sliding config: sigma_ratio must be > 0");
}

SlidingConfig paper_sliding_config() { return SlidingConfig{224, 112, 1.0 / 8.0}; }

template <typename T>
Tensor<T> gaussian_map(int crop, double sigma_ratio) {
  if (crop < 1 || !(sigma_ratio > 0)) throw DataError("gaussian_map: invalid crop or sigma");
  const double sigma = crop * sigma_ratio, centre = (crop - 1) / 2.0;
  std::vector<double> g(crop);
  for (int i = 0; i < crop; ++i) {
    const double d = i - centre;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  const double peak = g[crop / 2] * g[crop / 2];
  std::vector<T> out(static_cast<std::size_t>(crop) * crop);
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) {
      double v = g[y] * g[x] / peak;
      if (v <= 0) v = std::numeric_limits<double>::min();
      out[static_cast<std::size_t>(y) * crop + x] = static_cast<T>(v);
    }
  return Tensor<T>(Shape{crop, crop}, std::move(out));
}

std::vector<int> tile_starts(int length, int crop, int step) {
  if (crop < 1 || step < 1) throw DataError("tile_starts: crop and step must be positive");
  if (length <= crop) return {0};
  std::vector<int> out;
  for (int s = 0; s + crop <= length; s += step) out.push_back(s);
  if (out.back() + crop < length) out.push_back(length - crop);
  return out;
}

template <typename T>
Tensor<T> sliding_predict(const TilePredictor<T>& predictor, int classes, const Tensor<T>& image,
                          const SlidingConfig& cfg) {
  cfg.validate();
  if (image.rank() != 3) throw ShapeError("sliding_predict: image must be [C x H x W]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2), crop = cfg.crop;
  const int ph = std::max(h, crop), pw = std::max(w, crop);
  auto src = image.data();

  const auto weight = gaussian_map<T>(crop, cfg.sigma_ratio);
  auto gw = weight.data();
  std::vector<double> acc(static_cast<std::size_t>(classes) * ph * pw, 0.0);
  std::vector<double> norm(static_cast<std::size_t>(ph) * pw, 0.0);

  NoGradGuard guard;
  for (int y0 : tile_starts(ph, crop, cfg.step))
    for (int x0 : tile_starts(pw, crop, cfg.step)) {
      std::vector<T> tile(static_cast<std::size_t>(c) * crop * crop, T(0));
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < crop; ++y)
          for (int x = 0; x < crop; ++x) {
            const int gy = y0 + y, gx = x0 + x;
            if (gy < h && gx < w)
              tile[(static_cast<std::size_t>(ch) * crop + y) * crop + x] =
                  src[(static_cast<std::size_t>(ch) * h + gy) * w + gx];
          }
      const auto logits = predictor(Tensor<T>(Shape{c, crop, crop}, std::move(tile)));
      if (logits.rank() != 3 || logits.dim(0) != classes || logits.dim(1) != crop ||
          logits.dim(2) != crop)
        throw ShapeError("sliding_predict: predictor returned " + shape_str(logits.shape()));
      const auto probs = softmax(logits, 0);
      auto p = probs.data();
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
          const double wt = gw[static_cast<std::size_t>(y) * crop + x];
          const std::size_t o = static_cast<std::size_t>(y0 + y) * pw + (x0 + x);
          norm[o] += wt;
          for (int k = 0; k < classes; ++k)
            acc[static_cast<std::size_t>(k) * ph * pw + o] +=
                wt * p[(static_cast<std::size_t>(k) * crop + y) * crop + x];
        }
    }

  std::vector<T> out(static_cast<std::size_t>(classes) * h * w);
  for (int k = 0; k < classes; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t o = static_cast<std::size_t>(y) * pw + x;
        out[(static_cast<std::size_t>(k) * h + y) * w + x] =
            static_cast<T>(acc[static_cast<std::size_t>(k) * ph * pw + o] / norm[o]);
      }
  return Tensor<T>(Shape{classes, h, w}, std::move(out));
}

template <typename T>
Tensor<T> sliding_predict(const Model<T>& model, const Tensor<T>& image, const SlidingConfig& cfg) {
  TilePredictor<T> fn = [&model](const Tensor<T>& tile) { return forward(model, tile).logits; };
  return sliding_predict(fn, model.config.num_classes, image, cfg);
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& probs) {
  if (probs.rank() != 3) throw ShapeError("argmax_labels: expected [K x H x W]");
  const int k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto p = probs.data();
  LabelMap out{h, w, std::vector<std::uint8_t>(n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (p[c * n + i] > p[best * n + i]) best = c;
    out.values[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

#define SDAH_INSTANTIATE_INFERENCE(T)                                                           \
  template Tensor<T> gaussian_map<T>(int, double);                                              \
  template Tensor<T> sliding_predict(const TilePredictor<T>&, int, const Tensor<T>&,            \
                                     const SlidingConfig&);                                     \
  template Tensor<T> sliding_predict(const Model<T>&, const Tensor<T>&, const SlidingConfig&); \
  template LabelMap argmax_labels(const Tensor<T>&);

SDAH_INSTANTIATE_INFERENCE(float)
SDAH_INSTANTIATE_INFERENCE(double)

}  // namespace sdah
