#pragma once

#include <cstdint>
#include <vector>

#include "sdah/tensor.hpp"

namespace sdah {

// Elementwise. Operands must have identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

/// x[..., C] + b[C]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

/// [m x k]·[k x n], or batched [B x m x k]·[B x k x n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, int begin, int end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// out.flat[i] = x.flat[index[i]]; the backward pass scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::uint32_t> index, Shape out_shape);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Cross-correlation with zero padding. x is [C x H x W] or [N x C x H x W],
/// w is [C_out x C_in/groups x kh x kw], bias is [C_out] or undefined.
/// Output size follows floor((H + 2p - kh) / s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv2dOptions opt = {});

/// Transposed convolution. w is [C_in x C_out x kh x kw]; output side is
/// (H - 1)·s - 2p + kh.
template <typename T>
Tensor<T> deconv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1,
                   int padding = 0);

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Exact x·Φ(x).
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, int axis);

/// Samples f[C x H x W] at continuous (y, x) points [P x 2], returning [P x C].
/// Coordinates are clamped to [0, H-1] x [0, W-1]; gradients flow to both the
/// features and the (unclamped) coordinates.
template <typename T> Tensor<T> bilinear_sample(const Tensor<T>& f, const Tensor<T>& points);

/// Clamps column 0 of [.. x 2] points to [lo_y, hi_y] and column 1 to [lo_x, hi_x].
template <typename T>
Tensor<T> clamp_points(const Tensor<T>& points, T lo_y, T hi_y, T lo_x, T hi_x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Standard normal CDF and its density, shared with tests.
double normal_cdf(double x);
double normal_pdf(double x);

}  // namespace sdah
